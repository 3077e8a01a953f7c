"""
Three ways to train a non-autoregressive tagger
===============================================

Reference targets, distilled targets, and ENGINE (minimise the teacher's
energy of the network's own outputs). About three minutes on one core.
"""
import time

from engine_nat import training as tr

from common import data, reference_tagger, teacher

train, dev = data()
model = teacher(train, dev)

# %% distillation: the teacher's beam output replaces every reference
distilled = tr.distill(model, train, beam=5)
same = sum(a == b for a, b in zip(distilled.targets, train.targets)) / len(train)
print(f"distilled targets equal to the reference: {100 * same:.1f}%")

# %% the two cross-entropy baselines
t0 = time.time()
ref = reference_tagger(train, dev)
cfg = tr.TrainConfig(lr=3e-3, epochs=30, weight_decay=0.0, early_stop_metric="dev-bleu")
dis, _ = tr.train_nat_baseline(distilled, dev, "birnn-tagger", cfg)
print(f"baselines trained ({time.time() - t0:.0f}s)")

# %% ENGINE starts from the reference baseline; teacher and length head stay fixed
eng, report = tr.train_engine(model, train, dev, ref, tr.TrainConfig(lr=1e-3, epochs=10, weight_decay=0.0))
print("engine dev energy per epoch:", [round(r["dev-energy"], 2) for r in report.history])

# %% dev energy (lower is better under the teacher) and BLEU, at oracle length
print(f"{'regime':<10} {'energy':>8} {'bleu':>7}")
for name, net in [("reference", ref), ("distill", dis), ("engine", eng)]:
    m = tr.nat_dev_metrics(model, net, dev)
    print(f"{name:<10} {m['dev-energy']:8.2f} {m['dev-bleu']:7.2f}")
