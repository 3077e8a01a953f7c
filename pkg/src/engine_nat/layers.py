"""Parameter initialisation and the recurrent/attention blocks shared by the
teacher and the inference networks.

Blocks take ``P``, a mapping from parameter name to either a tape leaf or a
plain array, so the same code trains (leaves) and evaluates (arrays).
"""
from __future__ import annotations

import hashlib
from typing import Mapping

import numpy as np

from . import autodiff as ad

NEG_INF = -1e9


def uniform(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


def glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    return uniform(rng, (n_in, n_out), np.sqrt(6.0 / (n_in + n_out)))


def init_linear(params: dict, rng, name: str, n_in: int, n_out: int, bias: bool = True):
    params[f"{name}.W"] = glorot(rng, n_in, n_out)
    if bias:
        params[f"{name}.b"] = np.zeros(n_out)


def linear(P: Mapping, name: str, x) -> ad.Tensor:
    y = ad.matmul(x, P[f"{name}.W"])
    b = P.get(f"{name}.b")
    return y if b is None else ad.add(y, b)


def init_lstm(params: dict, rng, name: str, n_in: int, n_hidden: int):
    # gate layout: input, forget, output, candidate
    params[f"{name}.W"] = uniform(rng, (n_in + n_hidden, 4 * n_hidden), 1.0 / np.sqrt(n_hidden))
    b = np.zeros(4 * n_hidden)
    b[n_hidden:2 * n_hidden] = 1.0
    params[f"{name}.b"] = b


def lstm_step(P: Mapping, name: str, x, h, c):
    H = h.shape[-1]
    gates = ad.add(ad.matmul(ad.concat([x, h], axis=-1), P[f"{name}.W"]), P[f"{name}.b"])
    sig = ad.sigmoid(gates[..., :3 * H])
    i, f, o = sig[..., :H], sig[..., H:2 * H], sig[..., 2 * H:]
    g = ad.tanh(gates[..., 3 * H:])
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def run_lstm(P: Mapping, name: str, xs, mask: np.ndarray, n_hidden: int, reverse: bool = False):
    """Run over a list of ``(B, d)`` inputs. Where ``mask[:, t]`` is 0 the state is
    carried through unchanged, so right padding never leaks into either direction."""
    B = mask.shape[0]
    h = ad.Tensor(np.zeros((B, n_hidden)))
    c = ad.Tensor(np.zeros((B, n_hidden)))
    steps = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    outs = [None] * len(xs)
    for t in steps:
        h_new, c_new = lstm_step(P, name, xs[t], h, c)
        m = mask[:, t:t + 1]
        if m.all():
            h, c = h_new, c_new
        else:
            keep = 1.0 - m
            h = ad.add(ad.mul(h_new, m), ad.mul(h, keep))
            c = ad.add(ad.mul(c_new, m), ad.mul(c, keep))
        outs[t] = h
    return outs


def length_mask(lengths, width: int) -> np.ndarray:
    return (np.arange(width)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


def attend(queries, keys, values, key_mask: np.ndarray) -> ad.Tensor:
    """Dot-product attention. ``queries`` (B, Lq, d), ``keys``/``values`` (B, S, d),
    ``key_mask`` (B, S) or (B, Lq, S) with 1 for visible positions."""
    scores = ad.matmul(queries, ad.swapaxes(keys))
    bias = np.where(key_mask > 0, 0.0, NEG_INF)
    if bias.ndim == 2:
        bias = bias[:, None, :]
    weights = ad.softmax_rows(ad.add(scores, bias))
    return ad.matmul(weights, values)


def init_layer_norm(params: dict, name: str, dim: int):
    params[f"{name}.g"] = np.ones(dim)
    params[f"{name}.b"] = np.zeros(dim)


def layer_norm(P: Mapping, name: str, x, eps: float = 1e-5) -> ad.Tensor:
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.mean(ad.mul(xc, xc), axis=-1, keepdims=True)
    return ad.add(ad.mul(ad.div(xc, ad.sqrt(ad.add(var, eps))), P[f"{name}.g"]), P[f"{name}.b"])


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


def copy_params(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def init_encoder(params: dict, rng, name: str, vocab: int, emb: int, hidden: int,
                 max_positions: int | None = None):
    """Embedding plus a one-layer bidirectional LSTM. With ``max_positions`` the
    embedding also gets learned position-from-start and position-from-end vectors."""
    params[f"{name}.emb"] = rng.normal(0.0, 0.1, size=(vocab, emb))
    if max_positions:
        params[f"{name}.pos_fwd"] = rng.normal(0.0, 0.1, size=(max_positions, emb))
        params[f"{name}.pos_bwd"] = rng.normal(0.0, 0.1, size=(max_positions, emb))
    init_lstm(params, rng, f"{name}.fwd", emb, hidden)
    init_lstm(params, rng, f"{name}.bwd", emb, hidden)


def position_indices(lengths, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Offsets from the start and from the last real position, clipped at 0 on padding."""
    fwd = np.broadcast_to(np.arange(width), (len(lengths), width))
    bwd = np.clip(np.asarray(lengths)[:, None] - 1 - np.arange(width)[None, :], 0, None)
    return fwd, bwd


def encode(P: Mapping, name: str, tokens: np.ndarray, lengths: np.ndarray, hidden: int,
           dropout: float = 0.0, rng=None, train: bool = False):
    """Returns encoder states ``(B, S, 2*hidden)`` and the source mask ``(B, S)``."""
    B, S = tokens.shape
    mask = length_mask(lengths, S)
    x = ad.take(P[f"{name}.emb"], tokens)
    if f"{name}.pos_fwd" in P:
        fwd, bwd = position_indices(lengths, S)
        x = ad.add(x, ad.add(ad.take(P[f"{name}.pos_fwd"], fwd), ad.take(P[f"{name}.pos_bwd"], bwd)))
    x = ad.dropout(x, dropout, rng, train)
    xs = [x[:, t] for t in range(S)]
    hf = run_lstm(P, f"{name}.fwd", xs, mask, hidden)
    hb = run_lstm(P, f"{name}.bwd", xs, mask, hidden, reverse=True)
    enc = ad.stack([ad.concat([f, b], axis=-1) for f, b in zip(hf, hb)], axis=1)
    return enc, mask


def masked_mean(x, mask: np.ndarray) -> ad.Tensor:
    """Mean over axis 1 of ``x`` (B, S, d) counting only positions where mask is 1."""
    w = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    return ad.sum_(ad.mul(x, w[:, :, None]), axis=1)
