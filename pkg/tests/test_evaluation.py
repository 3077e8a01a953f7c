import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from engine_nat.corpus import EOS, generate_synthetic
from engine_nat.evaluation import (bleu, brute_force_argmin, candidate_count, evaluate_outputs,
                                   mean_energy, strip_eos)
from engine_nat.infnet import argmax_decode_batch
from engine_nat.teacher import beam_search, energy, greedy_decode

from conftest import random_net, random_teacher

sentences = st.lists(st.lists(st.integers(0, 6), min_size=1, max_size=8), min_size=1, max_size=6)


def test_bleu_identity():
    refs = [[1, 2, 3, 4], [5, 6, 7, 8, 9]]
    assert bleu(refs, refs) == pytest.approx(100.0)


def test_bleu_disjoint_is_zero():
    assert bleu([list("abcd")], [list("efgh")]) == 0.0


def test_bleu_one_substitution():
    # precisions 4/5, 3/4, 2/3, 1/2 and no brevity penalty: 100 * (1/5) ** (1/4)
    assert bleu([list("abcde")], [list("abcdf")]) == pytest.approx(66.874, abs=1e-3)
    assert bleu([list("abcde")], [list("abcdf")]) == pytest.approx(100 * 0.2 ** 0.25, rel=1e-12)


def test_bleu_smoothing_and_brevity():
    # 1 unigram match of 2, no bigrams -> add-one on n >= 2; hyp shorter than ref
    hyp, ref = [["a", "x"]], [["a", "b", "c"]]
    p = [1 / 2, 1 / 2, 1 / 1, 1 / 1]  # smoothed: bigram (0+1)/(1+1); trigram/4-gram (0+1)/(0+1)
    expected = 100 * math.exp(1 - 3 / 2) * math.exp(sum(math.log(v) for v in p) / 4)
    assert bleu(hyp, ref) == pytest.approx(expected, rel=1e-12)


def test_bleu_errors():
    with pytest.raises(ValueError, match="no hypotheses"):
        bleu([], [])
    with pytest.raises(ValueError):
        bleu([[1]], [[1], [2]])


@given(sentences, st.randoms(use_true_random=False))
def test_bleu_permutation_invariant(hyps, rnd):
    refs = [list(reversed(h)) + [1] for h in hyps]
    order = list(range(len(hyps)))
    rnd.shuffle(order)
    a = bleu(hyps, refs)
    b = bleu([hyps[i] for i in order], [refs[i] for i in order])
    assert a == pytest.approx(b, abs=1e-9)
    assert 0.0 <= a <= 100.0


def test_strip_eos():
    assert strip_eos([5, 6, EOS, 7]) == [5, 6]
    assert strip_eos([5]) == [5]


def test_mean_energy_single_pair_equals_energy(teacher):
    assert mean_energy(teacher, [[5, 6]], [[7, EOS]]) == pytest.approx(energy(teacher, [5, 6], [7, EOS]), abs=1e-12)


def test_out_of_vocabulary_hypothesis(teacher):
    with pytest.raises(ValueError, match="outside the target vocabulary"):
        mean_energy(teacher, [[5]], [[99, EOS]])


def test_mean_energy_needs_eos(teacher):
    with pytest.raises(ValueError, match="eos"):
        mean_energy(teacher, [[5]], [[5, 6]])


def test_mean_energy_uniform_teacher(teacher):
    teacher.params["dec.out.W"][:] = 0.0
    teacher.params["dec.out.b"][:] = 0.0
    hyps = [[5, EOS], [6, 7, 5, EOS], [EOS]]
    expected = np.mean([len(h) for h in hyps]) * math.log(teacher.vocab_size)
    assert mean_energy(teacher, [[5], [6], [7]], hyps) == pytest.approx(expected, abs=1e-12)


def test_mean_energy_is_linear(teacher):
    srcs, hyps = [[5], [6, 7]], [[5, EOS], [6, 6, EOS]]
    per = [energy(teacher, x, y) for x, y in zip(srcs, hyps)]
    assert mean_energy(teacher, srcs, hyps) == pytest.approx(np.mean(per), abs=1e-12)


def test_greedy_beats_random_strings():
    t = random_teacher(seed=3, scale=4.0)
    rng = np.random.default_rng(0)
    srcs = [list(rng.integers(5, 9, size=3)) for _ in range(20)]
    greedy = [greedy_decode(t, x, 6) for x in srcs]
    greedy = [g if g[-1] == EOS else g + [EOS] for g in greedy]
    rand = [list(rng.integers(3, 8, size=len(g) - 1)) + [EOS] for g in greedy]
    assert mean_energy(t, srcs, greedy) < mean_energy(t, srcs, rand)


def test_evaluate_outputs(teacher):
    corpus = generate_synthetic("copy", 6, (1, 3), 8, seed=0)
    res = evaluate_outputs(teacher, corpus, corpus.targets)
    assert res.bleu == pytest.approx(100.0)
    assert res.n_sentences == 6
    assert res.mean_energy == pytest.approx(mean_energy(teacher, corpus.sources, corpus.targets), abs=1e-12)


def test_oracle_single_position_enumerates_only_eos():
    t = random_teacher(tgt_vocab=6, seed=1)
    assert candidate_count(6, 1) == 1
    y, e = brute_force_argmin(t, [5], 1)
    assert y == [EOS] and e == energy(t, [5], [EOS])


def test_oracle_limits():
    with pytest.raises(ValueError, match="oracle limited"):
        brute_force_argmin(random_teacher(tgt_vocab=8), [5], 2)
    with pytest.raises(ValueError, match="oracle limited"):
        brute_force_argmin(random_teacher(tgt_vocab=6), [5], 5)


@pytest.mark.parametrize("seed", range(3))
def test_oracle_is_a_lower_bound(seed):
    t = random_teacher(tgt_vocab=6, seed=seed, scale=2.0)
    x = [5, 6 + seed]
    y_star, e_star = brute_force_argmin(t, x, 3)
    assert e_star == energy(t, x, y_star)
    outs = [greedy_decode(t, x, 3), beam_search(t, x, 3, 3)]
    net = random_net(tgt_vocab=6, seed=seed)
    for L in (1, 2, 3):
        y = argmax_decode_batch(net, [x], [L])[0][0]
        outs.append(y[:-1] + [EOS])
    for y in outs:
        if y and y[-1] == EOS and len(y) <= 3:
            assert e_star <= energy(t, x, y)
