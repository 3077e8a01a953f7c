"""Vocabularies, parallel corpora, synthetic tasks and token-budget batching."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, MASK, UNK = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<s>", "</s>", "<mask>", "<unk>")
N_RESERVED = len(RESERVED)

TASKS = ("copy", "reverse", "shifted-substitution")


class Vocabulary:
    """Bidirectional token/index map; indices 0..4 are pad, bos, eos, mask, unk."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:N_RESERVED]) != RESERVED:
            raise ValueError(f"vocabulary must start with the reserved symbols {RESERVED}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")

    pad, bos, eos, mask, unk = PAD, BOS, EOS, MASK, UNK

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __repr__(self):
        return f"Vocabulary(size={len(self)})"

    def encode(self, sentence: Iterable[str]) -> list[int]:
        return [self.index.get(tok, UNK) for tok in sentence]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        return cls(list(RESERVED) + [f"w{i}" for i in range(N_RESERVED, size)])


def build_vocab(lines: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Tokens with count >= min_count after the reserved block, by descending count
    then first occurrence."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter = Counter()
    first: dict[str, int] = {}
    n_lines = 0
    for line in lines:
        n_lines += 1
        for tok in line:
            counts[tok] += 1
            first.setdefault(tok, len(first))
    if n_lines == 0:
        raise ValueError("empty corpus")
    kept = [t for t in counts if counts[t] >= min_count and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], first[t]))
    return Vocabulary(list(RESERVED) + kept)


@dataclass(frozen=True)
class SentencePair:
    source: tuple[int, ...]
    target: tuple[int, ...]

    def __post_init__(self):
        if not self.target or self.target[-1] != EOS:
            raise ValueError("target must be nonempty and end with eos")
        if self.target.count(EOS) != 1:
            raise ValueError("eos must appear exactly once in the target")


@dataclass
class ParallelCorpus:
    pairs: list[SentencePair]
    vocab_src: Vocabulary
    vocab_tgt: Vocabulary

    def __post_init__(self):
        ns, nt = len(self.vocab_src), len(self.vocab_tgt)
        for i, p in enumerate(self.pairs):
            if any(not 0 <= t < ns for t in p.source) or any(not 0 <= t < nt for t in p.target):
                raise ValueError(f"pair {i} has indices outside the vocabulary")

    def __len__(self):
        return len(self.pairs)

    @property
    def sources(self) -> list[tuple[int, ...]]:
        return [p.source for p in self.pairs]

    @property
    def targets(self) -> list[tuple[int, ...]]:
        return [p.target for p in self.pairs]

    def max_source_len(self) -> int:
        return max((len(p.source) for p in self.pairs), default=0)

    def max_target_len(self) -> int:
        return max((len(p.target) for p in self.pairs), default=0)

    def with_targets(self, targets: Sequence[Sequence[int]]) -> "ParallelCorpus":
        if len(targets) != len(self.pairs):
            raise ValueError("need one target per pair")
        pairs = [SentencePair(p.source, tuple(int(t) for t in y)) for p, y in zip(self.pairs, targets)]
        return ParallelCorpus(pairs, self.vocab_src, self.vocab_tgt)

    def subset(self, indices: Iterable[int]) -> "ParallelCorpus":
        return ParallelCorpus([self.pairs[i] for i in indices], self.vocab_src, self.vocab_tgt)


# ---------------------------------------------------------------- synthetic data

def substitute(symbol: int, vocab_size: int, offset: int = 3) -> int:
    n = vocab_size - N_RESERVED
    return (symbol - N_RESERVED + offset) % n + N_RESERVED


def transform(task: str, source: Sequence[int], vocab_size: int, offset: int = 3) -> list[int]:
    if task == "copy":
        out = list(source)
    elif task == "reverse":
        out = list(source)[::-1]
    elif task == "shifted-substitution":
        out = [substitute(s, vocab_size, offset) for s in source][::-1]
    else:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    return out + [EOS]


def generate_synthetic(task: str, n_pairs: int, len_range: tuple[int, int], vocab_size: int,
                       seed: int, alt_rate: float = 0.0) -> ParallelCorpus:
    """Random source strings over symbols 5..vocab_size-1 and their task transform.

    With ``alt_rate > 0`` (shifted-substitution only) each reference independently
    keeps source order instead of reversing with that probability, so a source has
    two valid renderings and the references become multimodal.
    """
    if vocab_size < N_RESERVED + 1:
        raise ValueError("vocab_size must be >= 6")
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad len_range {len_range}")
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if alt_rate and task != "shifted-substitution":
        raise ValueError("alt_rate only applies to shifted-substitution")
    rng = np.random.default_rng(seed)
    vocab = Vocabulary.synthetic(vocab_size)
    pairs = []
    for _ in range(n_pairs):
        n = int(rng.integers(lo, hi + 1))
        src = [int(s) for s in rng.integers(N_RESERVED, vocab_size, size=n)]
        tgt = transform(task, src, vocab_size)
        if alt_rate and rng.random() < alt_rate:
            tgt = tgt[-2::-1] + [EOS]
        pairs.append(SentencePair(tuple(src), tuple(tgt)))
    return ParallelCorpus(pairs, vocab, vocab)


# ---------------------------------------------------------------- files

def read_parallel(prefix, vocab_src: Vocabulary | None = None,
                  vocab_tgt: Vocabulary | None = None, min_count: int = 1) -> ParallelCorpus:
    """Load ``<prefix>.src`` / ``<prefix>.tgt``; eos is appended to every target."""
    prefix = str(prefix)
    src_lines = [l.split() for l in Path(prefix + ".src").read_text(encoding="utf-8").splitlines()]
    tgt_lines = [l.split() for l in Path(prefix + ".tgt").read_text(encoding="utf-8").splitlines()]
    if len(src_lines) != len(tgt_lines):
        raise ValueError(f"{prefix}: {len(src_lines)} source lines but {len(tgt_lines)} target lines")
    vocab_src = vocab_src or build_vocab(src_lines, min_count)
    vocab_tgt = vocab_tgt or build_vocab(tgt_lines, min_count)
    pairs = [SentencePair(tuple(vocab_src.encode(s)), tuple(vocab_tgt.encode(t)) + (EOS,))
             for s, t in zip(src_lines, tgt_lines)]
    return ParallelCorpus(pairs, vocab_src, vocab_tgt)


def write_parallel(corpus: ParallelCorpus, prefix) -> None:
    prefix = str(prefix)
    Path(prefix + ".src").write_text(
        "".join(" ".join(corpus.vocab_src.decode(p.source)) + "\n" for p in corpus.pairs), encoding="utf-8")
    Path(prefix + ".tgt").write_text(
        "".join(" ".join(corpus.vocab_tgt.decode(p.target[:-1])) + "\n" for p in corpus.pairs), encoding="utf-8")


# ---------------------------------------------------------------- batching

def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), max(int(lengths.max(initial=0)), 1)), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


@dataclass
class Batch:
    sources: np.ndarray
    source_lengths: np.ndarray
    targets: np.ndarray
    target_lengths: np.ndarray
    indices: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.indices)

    @property
    def n_target_tokens(self) -> int:
        return int(self.target_lengths.sum())

    @classmethod
    def from_pairs(cls, pairs: Sequence[SentencePair], indices: Sequence[int]) -> "Batch":
        src, src_len = pad_batch([p.source for p in pairs])
        tgt, tgt_len = pad_batch([p.target for p in pairs])
        return cls(src, src_len, tgt, tgt_len, list(indices))


def make_batches(corpus: ParallelCorpus, token_budget: int, seed: int | None = 0) -> list[Batch]:
    """Shuffle (unless ``seed`` is None) and pack pairs so each batch holds at most
    ``token_budget`` target tokens."""
    for i, p in enumerate(corpus.pairs):
        if len(p.target) > token_budget:
            raise ValueError(f"pair {i} has {len(p.target)} target tokens, over the budget of {token_budget}")
    order = list(range(len(corpus.pairs)))
    if seed is not None:
        order = [int(i) for i in np.random.default_rng(seed).permutation(len(order))]
    batches, current, used = [], [], 0
    for i in order:
        n = len(corpus.pairs[i].target)
        if current and used + n > token_budget:
            batches.append(current)
            current, used = [], 0
        current.append(i)
        used += n
    if current:
        batches.append(current)
    return [Batch.from_pairs([corpus.pairs[i] for i in b], b) for b in batches]
