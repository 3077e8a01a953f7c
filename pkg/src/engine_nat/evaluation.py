"""Corpus BLEU, mean teacher energy, and an exhaustive argmin oracle."""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import EOS, ParallelCorpus
from .teacher import TeacherModel, energy, score_sequences


@dataclass
class EvalResult:
    bleu: float
    mean_energy: float
    n_sentences: int

    def as_dict(self) -> dict:
        return {"bleu": self.bleu, "mean_energy": self.mean_energy, "n_sentences": self.n_sentences}


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU-4 in [0, 100] with brevity penalty.

    Precisions for n >= 2 with no matches use add-one smoothing; a zero unigram
    precision gives 0.
    """
    if len(hypotheses) == 0:
        raise ValueError("no hypotheses to score")
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if m == 0:
            m, t = m + 1, t + 1
        log_p += math.log(m / t)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / max_n)


def strip_eos(tokens: Sequence[int]) -> list[int]:
    """Tokens before the first eos."""
    out = []
    for t in tokens:
        if t == EOS:
            break
        out.append(int(t))
    return out


def mean_energy(teacher: TeacherModel, sources, hypotheses) -> float:
    for i, y in enumerate(hypotheses):
        if len(y) == 0 or y[-1] != EOS:
            raise ValueError(f"hypothesis {i} is not eos-terminated")
    return float(np.mean(score_sequences(teacher, sources, hypotheses)))


def evaluate_outputs(teacher: TeacherModel, corpus: ParallelCorpus, hypotheses) -> EvalResult:
    """BLEU against references plus teacher energy of the raw hypotheses.

    Non-autoregressive outputs at a fixed length need not end in eos, so the
    energy scores every emitted position; BLEU compares text before the first eos.
    """
    energies = score_sequences(teacher, corpus.sources, hypotheses)
    score = bleu([strip_eos(h) for h in hypotheses], [strip_eos(r) for r in corpus.targets])
    return EvalResult(score, float(np.mean(energies)), len(corpus))


MAX_ORACLE_VOCAB = 6
MAX_ORACLE_LEN = 4


def brute_force_argmin(teacher: TeacherModel, x: Sequence[int], max_len: int):
    """Exact minimum-energy eos-terminated sequence of length <= max_len.

    Candidates are visited in length-then-lexicographic order and only a strictly
    lower energy replaces the incumbent.
    """
    V = teacher.vocab_size
    if V > MAX_ORACLE_VOCAB or max_len > MAX_ORACLE_LEN:
        raise ValueError(f"oracle limited to |V| <= {MAX_ORACLE_VOCAB} and max_len <= {MAX_ORACLE_LEN}")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    body = [t for t in range(V) if t != EOS]
    best, best_e = None, math.inf
    for n in range(max_len):
        for prefix in itertools.product(body, repeat=n):
            y = list(prefix) + [EOS]
            e = energy(teacher, x, y)
            if e < best_e:
                best, best_e = y, e
    return best, best_e


def candidate_count(vocab_size: int, max_len: int) -> int:
    return sum((vocab_size - 1) ** n for n in range(max_len))
