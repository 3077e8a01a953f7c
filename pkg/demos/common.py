"""Shared data and a cached teacher for the demo scripts.

Artifacts go to ``demo_out/`` next to this file; delete it to retrain.
"""
import logging
import time
from pathlib import Path

from engine_nat import training as tr
from engine_nat.corpus import generate_synthetic
from engine_nat.teacher import TeacherModel

OUT = Path(__file__).resolve().parent / "demo_out"

# half of the references use the alternate word order, so they are multimodal
TASK, VOCAB, LENGTHS, ALT = "shifted-substitution", 20, (3, 8), 0.5

logging.basicConfig(level=logging.WARNING, format="%(message)s")


def data():
    train = generate_synthetic(TASK, 2000, LENGTHS, VOCAB, seed=1, alt_rate=ALT)
    dev = generate_synthetic(TASK, 200, LENGTHS, VOCAB, seed=2, alt_rate=ALT)
    return train, dev


def teacher(train, dev) -> TeacherModel:
    stem = OUT / "teacher"
    if stem.with_suffix(".params").exists():
        return TeacherModel.load(stem)
    t0 = time.time()
    cfg = tr.TrainConfig(lr=3e-3, epochs=70, weight_decay=0.0, early_stop_metric="dev-bleu")
    model, report = tr.train_teacher(train, dev, cfg)
    print(f"teacher: dev bleu {report.best_value:.1f} at epoch {report.best_epoch} ({time.time() - t0:.0f}s)")
    OUT.mkdir(exist_ok=True)
    model.save(stem)
    return model


def reference_tagger(train, dev):
    from engine_nat.infnet import InferenceNetwork
    stem = OUT / "tagger_ref"
    if stem.with_suffix(".params").exists():
        return InferenceNetwork.load(stem)
    cfg = tr.TrainConfig(lr=3e-3, epochs=30, weight_decay=0.0, early_stop_metric="dev-bleu")
    net, _ = tr.train_nat_baseline(train, dev, "birnn-tagger", cfg)
    OUT.mkdir(exist_ok=True)
    net.save(stem)
    return net
