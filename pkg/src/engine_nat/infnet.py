"""Non-autoregressive inference networks.

Two architectures map a source and a requested target length ``L`` to ``L``
logit vectors in one parallel pass:

``birnn-tagger``
    BiLSTM source encoder; each target position builds a query from learned
    position-from-start and position-from-end embeddings, attends over the
    source, and a BiLSTM tagger plus a linear readout produce the logits.
``masked-conditional``
    Same source encoder; the decoder input is ``L`` tokens (mask tokens at
    masked slots) plus position embeddings, passed through self-attention,
    cross-attention and feed-forward blocks. Supports mask-predict refinement.

Both carry a length head over ``1..max_len`` fed by the mean source encoding.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from . import layers
from .corpus import MASK, pad_batch
from .teacher import _coerce, read_kv, write_kv

ARCHS = ("birnn-tagger", "masked-conditional")


@dataclass
class InfNetHyper:
    arch: str
    src_vocab: int
    tgt_vocab: int
    max_len: int
    emb: int = 32
    hidden: int = 32
    n_layers: int = 1
    dropout: float = 0.1

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")

    @property
    def dim(self) -> int:
        return 2 * self.hidden


LENGTH_PARAMS = ("len.W", "len.b")


@dataclass
class InferenceNetwork:
    hyper: InfNetHyper
    params: dict

    @classmethod
    def init(cls, hyper: InfNetHyper, seed: int = 0) -> "InferenceNetwork":
        rng = np.random.default_rng(seed)
        h, p = hyper, {}
        D = h.dim
        layers.init_encoder(p, rng, "enc", h.src_vocab, h.emb, h.hidden, max_positions=h.max_len)
        layers.init_linear(p, rng, "len", D, h.max_len)
        p["mem.pf"] = rng.normal(0.0, 1.0, size=(h.max_len, D))
        p["mem.pb"] = rng.normal(0.0, 1.0, size=(h.max_len, D))
        if h.arch == "birnn-tagger":
            p["tag.qf"] = rng.normal(0.0, 1.0, size=(h.max_len, D))
            p["tag.qb"] = rng.normal(0.0, 1.0, size=(h.max_len, D))
            layers.init_lstm(p, rng, "tag.fwd", D, h.hidden)
            layers.init_lstm(p, rng, "tag.bwd", D, h.hidden)
        else:
            p["dec.tok"] = rng.normal(0.0, 0.1, size=(h.tgt_vocab, D))
            p["dec.pf"] = rng.normal(0.0, 1.0, size=(h.max_len, D))
            p["dec.pb"] = rng.normal(0.0, 1.0, size=(h.max_len, D))
            for l in range(h.n_layers):
                for part in ("self", "cross"):
                    for proj in ("q", "k", "v", "o"):
                        layers.init_linear(p, rng, f"dec{l}.{part}.{proj}", D, D)
                layers.init_linear(p, rng, f"dec{l}.ff1", D, 2 * D)
                layers.init_linear(p, rng, f"dec{l}.ff2", 2 * D, D)
                for ln in ("ln1", "ln2", "ln3"):
                    layers.init_layer_norm(p, f"dec{l}.{ln}", D)
        layers.init_linear(p, rng, "out", D, h.tgt_vocab)
        return cls(hyper, p)

    @property
    def arch(self) -> str:
        return self.hyper.arch

    @property
    def vocab_size(self) -> int:
        return self.hyper.tgt_vocab

    def save(self, stem) -> None:
        stem = str(stem)
        ad.save_params(self.params, stem + ".params")
        write_kv(stem + ".config", {"kind": "infnet", **asdict(self.hyper)})

    @classmethod
    def load(cls, stem) -> "InferenceNetwork":
        stem = str(stem)
        cfg = read_kv(stem + ".config")
        if cfg.pop("kind", None) != "infnet":
            raise ValueError(f"{stem}.config does not describe an inference network")
        fields = InfNetHyper.__dataclass_fields__
        return cls(InfNetHyper(**{k: _coerce(fields[k].type, v) for k, v in cfg.items()}),
                   ad.load_params(stem + ".params"))


def max_len_for(max_source_len: int) -> int:
    return 2 * max_source_len + 2


# ---------------------------------------------------------------- forward passes

def _tagger(net, P, enc, key_pos, src_mask, tgt_len, L, train, rng):
    h = net.hyper
    fwd, bwd = layers.position_indices(tgt_len, L)
    q = ad.add(ad.take(P["tag.qf"], fwd), ad.take(P["tag.qb"], bwd))
    ctx = layers.attend(ad.mul(q, 1.0 / math.sqrt(h.dim)), ad.add(enc, key_pos), enc, src_mask)
    x = ad.dropout(ctx, h.dropout, rng, train)
    tmask = layers.length_mask(tgt_len, L)
    xs = [x[:, t] for t in range(L)]
    hf = layers.run_lstm(P, "tag.fwd", xs, tmask, h.hidden)
    hb = layers.run_lstm(P, "tag.bwd", xs, tmask, h.hidden, reverse=True)
    return ad.stack([ad.concat([f, b], axis=-1) for f, b in zip(hf, hb)], axis=1)


def _masked_conditional(net, P, enc, key_pos, src_mask, tgt_len, L, observed, train, rng):
    h = net.hyper
    D = h.dim
    fwd, bwd = layers.position_indices(tgt_len, L)
    x = ad.add(ad.take(P["dec.tok"], observed),
               ad.add(ad.take(P["dec.pf"], fwd), ad.take(P["dec.pb"], bwd)))
    x = ad.dropout(x, h.dropout, rng, train)
    tmask = layers.length_mask(tgt_len, L)
    scale = 1.0 / math.sqrt(D)
    for l in range(h.n_layers):
        pre = f"dec{l}"
        a = layers.attend(ad.mul(layers.linear(P, f"{pre}.self.q", x), scale),
                          layers.linear(P, f"{pre}.self.k", x), layers.linear(P, f"{pre}.self.v", x), tmask)
        x = layers.layer_norm(P, f"{pre}.ln1", ad.add(x, layers.linear(P, f"{pre}.self.o", a)))
        a = layers.attend(ad.mul(layers.linear(P, f"{pre}.cross.q", x), scale),
                          ad.add(layers.linear(P, f"{pre}.cross.k", enc), key_pos),
                          layers.linear(P, f"{pre}.cross.v", enc),
                          src_mask)
        x = layers.layer_norm(P, f"{pre}.ln2", ad.add(x, layers.linear(P, f"{pre}.cross.o", a)))
        f = layers.linear(P, f"{pre}.ff2", ad.relu(layers.linear(P, f"{pre}.ff1", x)))
        x = layers.layer_norm(P, f"{pre}.ln3", ad.add(x, ad.dropout(f, h.dropout, rng, train)))
    return x


class NetOutput(NamedTuple):
    logits: ad.Tensor          # (B, L, V)
    length_logp: ad.Tensor     # (B, max_len), column l-1 is length l


def forward_batch(net: InferenceNetwork, src: np.ndarray, src_len: np.ndarray, tgt_len,
                  P: Mapping | None = None, observed: np.ndarray | None = None,
                  train: bool = False, rng=None) -> NetOutput:
    P = net.params if P is None else P
    h = net.hyper
    tgt_len = np.asarray(tgt_len, dtype=np.int64)
    if np.any(tgt_len < 1) or np.any(tgt_len > h.max_len):
        raise ValueError(f"target lengths must lie in [1, {h.max_len}], got {tgt_len.tolist()}")
    L = int(tgt_len.max())
    enc, src_mask = layers.encode(P, "enc", src, src_len, h.hidden, h.dropout, rng, train)
    length_logp = ad.log_softmax(layers.linear(P, "len", layers.masked_mean(enc, src_mask)))
    # source positions enter the attention keys only, so target slots can align by offset
    sf, sb = layers.position_indices(src_len, src.shape[1])
    key_pos = ad.add(ad.take(P["mem.pf"], sf), ad.take(P["mem.pb"], sb))
    if h.arch == "birnn-tagger":
        if observed is not None:
            raise ValueError("the birnn-tagger takes no observed target tokens")
        states = _tagger(net, P, enc, key_pos, src_mask, tgt_len, L, train, rng)
    else:
        if observed is None:
            observed = np.full((len(tgt_len), L), MASK)
        states = _masked_conditional(net, P, enc, key_pos, src_mask, tgt_len, L, observed, train, rng)
    logits = layers.linear(P, "out", ad.dropout(states, h.dropout, rng, train))
    return NetOutput(logits, length_logp)


def forward(net: InferenceNetwork, x: Sequence[int], L: int) -> np.ndarray:
    """Eval-mode logits ``(L, V)`` for one source at target length ``L``."""
    if not 1 <= L <= net.hyper.max_len:
        raise ValueError(f"length {L} outside [1, {net.hyper.max_len}]")
    src, src_len = pad_batch([list(x)])
    return forward_batch(net, src, src_len, [L]).logits.data[0].copy()


# ---------------------------------------------------------------- lengths

class LengthPrediction(NamedTuple):
    candidates: list[tuple[int, float]]

    @property
    def lengths(self) -> list[int]:
        return [l for l, _ in self.candidates]


def _top_lengths(length_logp: np.ndarray, k: int) -> list[tuple[int, float]]:
    order = np.argsort(-length_logp, kind="stable")[:k]
    return [(int(i) + 1, float(length_logp[i])) for i in order]


def predict_length(net: InferenceNetwork, x: Sequence[int], k: int = 3) -> LengthPrediction:
    if k < 1:
        raise ValueError("k must be >= 1")
    src, src_len = pad_batch([list(x)])
    logp = forward_batch(net, src, src_len, [1]).length_logp.data[0]
    return LengthPrediction(_top_lengths(logp, k))


def predict_lengths_batch(net: InferenceNetwork, sources, k: int = 3) -> list[LengthPrediction]:
    src, src_len = pad_batch([list(s) for s in sources])
    logp = forward_batch(net, src, src_len, np.ones(len(sources), dtype=np.int64)).length_logp.data
    return [LengthPrediction(_top_lengths(row, k)) for row in logp]


# ---------------------------------------------------------------- decoding

def _argmax_with_scores(logits: np.ndarray, lengths) -> tuple[list[list[int]], list[np.ndarray]]:
    logp = ad.log_softmax(logits).data
    toks = logp.argmax(axis=-1)
    best = np.take_along_axis(logp, toks[..., None], axis=-1)[..., 0]
    return ([toks[i, :l].tolist() for i, l in enumerate(lengths)],
            [best[i, :l].copy() for i, l in enumerate(lengths)])


def argmax_decode_batch(net: InferenceNetwork, sources, lengths):
    """One fully-masked parallel pass at the given lengths: tokens and their log-probs."""
    src, src_len = pad_batch([list(s) for s in sources])
    out = forward_batch(net, src, src_len, lengths)
    return _argmax_with_scores(out.logits.data, lengths)


def decode_length_beam(net: InferenceNetwork, x: Sequence[int], k: int = 3, with_score: bool = False,
                       iterations: int = 1):
    """Decode at each of the top-k predicted lengths; keep the highest mean token log-prob."""
    return decode_length_beam_batch(net, [x], k, with_score, iterations)[0]


def decode_length_beam_batch(net: InferenceNetwork, sources, k: int = 3, with_score: bool = False,
                             iterations: int = 1):
    """Batched length-beam decoding; each candidate length gets ``iterations`` mask-predict passes."""
    preds = predict_lengths_batch(net, sources, k)
    flat_src = [s for s, p in zip(sources, preds) for _ in p.lengths]
    flat_len = [l for p in preds for l in p.lengths]
    toks, scores = mask_predict_batch(net, flat_src, flat_len, iterations)
    out, pos = [], 0
    for p in preds:
        n = len(p.lengths)
        means = [float(s.mean()) for s in scores[pos:pos + n]]
        j = int(np.argmax(means))  # ties go to the more probable length
        out.append((toks[pos + j], means[j]) if with_score else toks[pos + j])
        pos += n
    return out


def n_masked(L: int, i: int, N: int) -> int:
    return math.ceil(L * (N - i) / N)


def _require_cmlm(net):
    if net.arch != "masked-conditional":
        raise ValueError("refinement requires masked-conditional")


def refine_batch(net: InferenceNetwork, sources, prev_tokens, prev_scores, i: int, N: int):
    """Re-mask the lowest-scoring positions of each hypothesis and re-predict them."""
    _require_cmlm(net)
    if not 1 <= i < N:
        raise ValueError(f"refinement iteration {i} outside [1, {N})")
    lengths = [len(t) for t in prev_tokens]
    obs, _ = pad_batch([list(t) for t in prev_tokens])
    masked = np.zeros(obs.shape, dtype=bool)
    for b, (l, sc) in enumerate(zip(lengths, prev_scores)):
        worst = np.argsort(np.asarray(sc), kind="stable")[:n_masked(l, i, N)]
        masked[b, worst] = True
    obs = np.where(masked, MASK, obs)
    src, src_len = pad_batch([list(s) for s in sources])
    logits = forward_batch(net, src, src_len, lengths, observed=obs).logits.data
    new_toks, new_scores = _argmax_with_scores(logits, lengths)
    toks_out, scores_out = [], []
    for b, l in enumerate(lengths):
        m = masked[b, :l]
        t = np.where(m, new_toks[b], np.asarray(prev_tokens[b]))
        s = np.where(m, new_scores[b], np.asarray(prev_scores[b], dtype=np.float64))
        toks_out.append([int(v) for v in t])
        scores_out.append(s)
    return toks_out, scores_out


def refine(net: InferenceNetwork, x: Sequence[int], prev_tokens, prev_scores, i: int, N: int):
    toks, scores = refine_batch(net, [x], [prev_tokens], [prev_scores], i, N)
    return toks[0], scores[0]


def mask_predict_batch(net: InferenceNetwork, sources, lengths, iterations: int = 1):
    """Fully masked first pass, then ``iterations - 1`` refinement passes."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if iterations > 1:
        _require_cmlm(net)
    toks, scores = argmax_decode_batch(net, sources, lengths)
    for i in range(1, iterations):
        toks, scores = refine_batch(net, sources, toks, scores, i, iterations)
    return toks, scores
