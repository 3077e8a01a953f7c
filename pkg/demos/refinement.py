"""
Mask-predict refinement with and without ENGINE
===============================================

A two-layer masked-conditional network decoded with three candidate lengths
and 1..10 refinement passes. About four minutes on one core.
"""
from dataclasses import replace

from engine_nat import training as tr
from engine_nat.evaluation import bleu, strip_eos
from engine_nat.infnet import decode_length_beam_batch

from common import data, teacher

train, dev = data()
model = teacher(train, dev)

hyper = replace(tr.default_infnet_hyper(train, "masked-conditional"), n_layers=2)
cfg = tr.TrainConfig(lr=3e-3, epochs=100, weight_decay=0.0, early_stop_metric="dev-bleu")
base, _ = tr.train_nat_baseline(train, dev, "masked-conditional", cfg, hyper)
eng, _ = tr.train_engine(model, train, dev, base, tr.TrainConfig(lr=1e-3, epochs=10, weight_decay=0.0))


def score(net, iterations):
    hyps = decode_length_beam_batch(net, dev.sources, 3, iterations=iterations)
    return bleu([strip_eos(h) for h in hyps], [strip_eos(t) for t in dev.targets])


# %% BLEU by number of refinement passes
its = (1, 2, 4, 10)
print("net       " + "".join(f"{n:>8}" for n in its))
for name, net in [("baseline", base), ("engine", eng)]:
    print(f"{name:<10}" + "".join(f"{score(net, n):8.2f}" for n in its))
