"""Autoregressive encoder-decoder energy.

The decoder takes a *distribution* over the target vocabulary at each input
slot and embeds it as the expected embedding ``dist @ E``. A one-hot input
therefore reproduces ordinary token-conditioned decoding exactly, and the
energy extends from token sequences to sequences of distributions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from . import layers
from .corpus import BOS, EOS, pad_batch
from .operators import OperatorKind, relax

SIMPLEX_TOL = 1e-6


@dataclass
class TeacherHyper:
    src_vocab: int
    tgt_vocab: int
    emb: int = 32
    enc_hidden: int = 32
    dec_hidden: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if self.dec_hidden != 2 * self.enc_hidden:
            raise ValueError("dot-product attention needs dec_hidden == 2 * enc_hidden")


@dataclass
class TeacherModel:
    hyper: TeacherHyper
    params: dict

    @classmethod
    def init(cls, hyper: TeacherHyper, seed: int = 0) -> "TeacherModel":
        rng = np.random.default_rng(seed)
        p: dict = {}
        h = hyper
        layers.init_encoder(p, rng, "enc", h.src_vocab, h.emb, h.enc_hidden)
        p["dec.emb"] = rng.normal(0.0, 0.1, size=(h.tgt_vocab, h.emb))
        layers.init_linear(p, rng, "dec.init", 2 * h.enc_hidden, h.dec_hidden)
        layers.init_lstm(p, rng, "dec.lstm", h.emb + h.dec_hidden, h.dec_hidden)
        layers.init_linear(p, rng, "dec.att", h.dec_hidden + 2 * h.enc_hidden, h.dec_hidden)
        layers.init_linear(p, rng, "dec.out", h.dec_hidden, h.tgt_vocab)
        return cls(hyper, p)

    @property
    def vocab_size(self) -> int:
        return self.hyper.tgt_vocab

    def save(self, stem) -> None:
        stem = str(stem)
        ad.save_params(self.params, stem + ".params")
        write_kv(stem + ".config", {"kind": "teacher", **asdict(self.hyper)})

    @classmethod
    def load(cls, stem) -> "TeacherModel":
        stem = str(stem)
        cfg = read_kv(stem + ".config")
        if cfg.pop("kind", None) != "teacher":
            raise ValueError(f"{stem}.config does not describe a teacher model")
        hyper = TeacherHyper(**{k: _coerce(TeacherHyper.__dataclass_fields__[k].type, v) for k, v in cfg.items()})
        return cls(hyper, ad.load_params(stem + ".params"))


def write_kv(path, values: Mapping) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in values.items()), encoding="utf-8")


def read_kv(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(typ, value: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    return value


class DecoderState(NamedTuple):
    h: ad.Tensor
    c: ad.Tensor
    att: ad.Tensor
    enc: ad.Tensor
    enc_mask: np.ndarray

    def select(self, rows) -> "DecoderState":
        rows = np.asarray(rows)
        return DecoderState(ad.Tensor(self.h.data[rows]), ad.Tensor(self.c.data[rows]),
                            ad.Tensor(self.att.data[rows]), ad.Tensor(self.enc.data[rows]),
                            self.enc_mask[rows])


# ---------------------------------------------------------------- core network

def init_state(model: TeacherModel, src: np.ndarray, src_len: np.ndarray, P: Mapping | None = None,
               train: bool = False, rng=None) -> DecoderState:
    P = model.params if P is None else P
    h = model.hyper
    enc, mask = layers.encode(P, "enc", src, src_len, h.enc_hidden, h.dropout, rng, train)
    h0 = ad.tanh(layers.linear(P, "dec.init", layers.masked_mean(enc, mask)))
    B = src.shape[0]
    return DecoderState(h0, ad.Tensor(np.zeros((B, h.dec_hidden))),
                        ad.Tensor(np.zeros((B, h.dec_hidden))), enc, mask)


def embed_target(model: TeacherModel, dist, P: Mapping | None = None) -> ad.Tensor:
    """Expected target embedding of a (batch of) distribution(s) over the vocabulary."""
    P = model.params if P is None else P
    dist = dist if isinstance(dist, ad.Tensor) else ad.Tensor(dist)
    if dist.ndim == 1:
        dist = ad.reshape(dist, (1, -1))
    return ad.matmul(dist, P["dec.emb"])


def _step(model: TeacherModel, P: Mapping, state: DecoderState, dist, train=False, rng=None):
    emb = embed_target(model, dist, P)
    h, c = layers.lstm_step(P, "dec.lstm", ad.concat([emb, state.att], axis=-1), state.h, state.c)
    B, H = h.shape
    ctx = layers.attend(ad.reshape(h, (B, 1, H)), state.enc, state.enc, state.enc_mask)
    ctx = ad.reshape(ctx, (B, ctx.shape[-1]))
    att = ad.tanh(layers.linear(P, "dec.att", ad.concat([h, ctx], axis=-1)))
    logits = layers.linear(P, "dec.out", ad.dropout(att, model.hyper.dropout, rng, train))
    return ad.log_softmax(logits), DecoderState(h, c, att, state.enc, state.enc_mask)


def check_simplex(dist: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    if np.any(dist < -tol) or np.any(np.abs(dist.sum(axis=-1) - 1.0) > tol):
        raise ValueError("decoder input is not a distribution over the vocabulary")


def decoder_step(model: TeacherModel, state: DecoderState, dist, P: Mapping | None = None):
    """One decoder step fed a distribution-valued input. Returns ``(log_probs, new_state)``."""
    data = dist.data if isinstance(dist, ad.Tensor) else np.asarray(dist, dtype=np.float64)
    check_simplex(data)
    P = model.params if P is None else P
    return _step(model, P, state, dist)


def onehot(tokens, vocab: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    out = np.zeros(tokens.shape + (vocab,))
    np.put_along_axis(out, tokens[..., None], 1.0, axis=-1)
    return out


def sequence_energies(model: TeacherModel, src: np.ndarray, src_len: np.ndarray,
                      inputs, outputs, tgt_len: np.ndarray, P: Mapping | None = None,
                      train: bool = False, rng=None) -> ad.Tensor:
    """Per-sentence energies ``-sum_t outputs[:, t] . log p(. | bos, inputs[:, :t], x)``.

    ``inputs`` is ``(B, L-1, V)`` (decoder inputs after bos), ``outputs`` is
    ``(B, L, V)``; positions at or beyond ``tgt_len`` contribute nothing.
    """
    P = model.params if P is None else P
    B, L = outputs.shape[0], outputs.shape[1]
    V = model.vocab_size
    mask = layers.length_mask(tgt_len, L)
    state = init_state(model, src, src_len, P, train, rng)
    dist = ad.Tensor(onehot(np.full(B, BOS), V))
    terms = []
    for t in range(L):
        logp, state = _step(model, P, state, dist, train, rng)
        e_t = ad.neg(ad.sum_(ad.mul(outputs[:, t], logp), axis=-1))
        terms.append(ad.mul(e_t, mask[:, t]))
        if t < L - 1:
            dist = inputs[:, t]
    return ad.sum_(ad.stack(terms, axis=1), axis=1)


def _as_batch(sources: Sequence[Sequence[int]]):
    return pad_batch([list(s) for s in sources])


def score_sequences(model: TeacherModel, sources, sequences) -> np.ndarray:
    """Energies ``-log p(y | x)`` of token sequences, batched; no eos requirement."""
    src, src_len = _as_batch(sources)
    tgt, tgt_len = pad_batch([list(y) for y in sequences])
    if np.any(tgt_len == 0):
        raise ValueError("cannot score an empty target")
    V = model.vocab_size
    if tgt.min() < 0 or tgt.max() >= V:
        raise ValueError(f"token outside the target vocabulary of size {V}")
    out = onehot(tgt, V)
    return sequence_energies(model, src, src_len, out[:, :-1], out, tgt_len).data.copy()


def energy(model: TeacherModel, x: Sequence[int], y: Sequence[int]) -> float:
    """``E(x, y) = -sum_{t=1..|y|} log p(y_t | y_<t, x)`` with ``y_0 = bos``."""
    if len(y) == 0:
        raise ValueError("energy of an empty target")
    if y[-1] != EOS:
        raise ValueError("target must end with eos")
    return float(score_sequences(model, [x], [y])[0])


def batch_generalized_energy(model: TeacherModel, src: np.ndarray, src_len: np.ndarray, logits,
                             tgt_len: np.ndarray, o1, o2, rng=None,
                             P: Mapping | None = None) -> ad.Tensor:
    """Generalized energies for a batch of logit blocks ``(B, L, V)``.

    O1 maps logits to decoder inputs (positions 1..L-1; position 0 is bos),
    O2 maps them to the distribution scored against each step's log-probs.
    """
    logits = logits if isinstance(logits, ad.Tensor) else ad.Tensor(logits)
    if logits.shape[1] == 0:
        raise ValueError("generalized energy needs at least one position")
    o1, o2 = OperatorKind.parse(o1), OperatorKind.parse(o2)
    outputs = relax(o2, logits, rng)
    inputs = relax(o1, logits[:, :-1], rng) if logits.shape[1] > 1 else None
    return sequence_energies(model, src, src_len, inputs, outputs, tgt_len, P)


def generalized_energy(model: TeacherModel, x: Sequence[int], logits, o1="sx", o2="sx",
                       rng=None, P: Mapping | None = None) -> ad.Tensor:
    """Scalar generalized energy of one source and its ``(T, V)`` logits."""
    logits = logits if isinstance(logits, ad.Tensor) else ad.Tensor(logits)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError(f"expected (T, V) logits with T >= 1, got {logits.shape}")
    T, V = logits.shape
    src, src_len = _as_batch([x])
    e = batch_generalized_energy(model, src, src_len, ad.reshape(logits, (1, T, V)),
                                 np.array([T]), o1, o2, rng, P)
    return ad.reshape(e, ())


# ---------------------------------------------------------------- decoding

def greedy_decode_batch(model: TeacherModel, sources, max_len: int) -> list[list[int]]:
    src, src_len = _as_batch(sources)
    B, V = len(sources), model.vocab_size
    state = init_state(model, src, src_len)
    prev = np.full(B, BOS)
    out = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        logp, state = _step(model, model.params, state, onehot(prev, V))
        prev = logp.data.argmax(axis=-1)
        for i in np.flatnonzero(~done):
            out[i].append(int(prev[i]))
        done |= prev == EOS
        if done.all():
            break
    return out


def greedy_decode(model: TeacherModel, x: Sequence[int], max_len: int) -> list[int]:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return greedy_decode_batch(model, [x], max_len)[0]


def beam_search(model: TeacherModel, x: Sequence[int], beam: int, max_len: int,
                with_score: bool = False):
    """Beam search over summed log-probabilities, no length normalisation.

    Hypotheses that emit eos leave the beam and compete by total score. Search
    stops once no live hypothesis can beat the best finished one (log-probs are
    non-positive). If nothing finishes within ``max_len`` the best live prefix
    is returned, so ``beam=1`` matches greedy decoding.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    V = model.vocab_size
    src, src_len = _as_batch([x])
    state = init_state(model, src, src_len)
    seqs: list[list[int]] = [[]]
    scores = np.zeros(1)
    prev = np.array([BOS])
    finished: list[tuple[float, list[int]]] = []
    for _ in range(max_len):
        logp, state = _step(model, model.params, state, onehot(prev, V))
        cand = (scores[:, None] + logp.data).reshape(-1)
        order = np.argsort(-cand, kind="stable")[:beam]
        rows, toks, keep = [], [], []
        for flat in order:
            r, tok = divmod(int(flat), V)
            if tok == EOS:
                finished.append((float(cand[flat]), seqs[r] + [EOS]))
            else:
                rows.append(r)
                toks.append(tok)
                keep.append(float(cand[flat]))
        if not rows:
            seqs = []
            break
        seqs = [seqs[r] + [t] for r, t in zip(rows, toks)]
        scores = np.array(keep)
        prev = np.array(toks)
        state = state.select(rows)
        if finished and max(s for s, _ in finished) >= scores.max():
            break
    if finished:
        score, best = max(finished, key=lambda f: f[0])  # first of equal scores wins
    else:
        i = int(np.argmax(scores))
        score, best = float(scores[i]), seqs[i]
    return (best, score) if with_score else best
