"""Teacher pretraining, the three inference-network regimes, and the operator grid.

Regimes:

* reference baseline: per-position cross-entropy on the reference targets,
* distill: the same loss on the teacher's beam-search outputs,
* ENGINE: minimise the teacher's generalized energy of the network's own
  logits, starting from a cross-entropy baseline, teacher frozen.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from . import layers
from .corpus import EOS, MASK, ParallelCorpus, make_batches
from .evaluation import bleu, evaluate_outputs, strip_eos
from .infnet import (LENGTH_PARAMS, InferenceNetwork, InfNetHyper, argmax_decode_batch,
                     forward_batch, max_len_for)
from .operators import ALL_KINDS, OperatorKind
from .teacher import (TeacherHyper, TeacherModel, batch_generalized_energy, beam_search,
                      greedy_decode, greedy_decode_batch, onehot, score_sequences,
                      sequence_energies)

log = logging.getLogger(__name__)

LR_GRID = (5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6)
EARLY_STOP_METRICS = ("dev-bleu", "dev-energy")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_grid: tuple = LR_GRID
    epochs: int = 30
    token_budget: int = 1024
    weight_decay: float = 0.01
    dropout: float = 0.1
    seed: int = 0
    o1: OperatorKind = OperatorKind.SX
    o2: OperatorKind = OperatorKind.ST
    early_stop_metric: str = "dev-energy"

    def __post_init__(self):
        self.o1 = OperatorKind.parse(self.o1)
        self.o2 = OperatorKind.parse(self.o2)
        self.lr_grid = tuple(float(v) for v in self.lr_grid)
        if self.early_stop_metric not in EARLY_STOP_METRICS:
            raise ValueError(f"early_stop_metric must be one of {EARLY_STOP_METRICS}")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["o1"], d["o2"] = self.o1.value, self.o2.value
        d["lr_grid"] = list(self.lr_grid)
        return d


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class ExperimentReport:
    regime: str
    config: dict
    metric: str
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_value: float | None = None
    test: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_tsv(self) -> str:
        keys = sorted({k for row in self.history for k in row} - {"epoch"})
        rows = [["epoch"] + keys] + [[str(r["epoch"])] + [_fmt(r.get(k)) for k in keys] for r in self.history]
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "".join("\t".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n" for r in rows)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# ---------------------------------------------------------------- generic loop

def fit(params: dict, trainable, loss_fn: Callable, corpus: ParallelCorpus, cfg: TrainConfig,
        evaluate: Callable[[dict], dict], metric_key: str, mode: str, report: ExperimentReport,
        after_epoch: Callable[[int], None] | None = None) -> dict:
    """Adam over ``trainable`` names; returns the parameters of the best evaluated epoch
    (epoch 0 = the initial parameters)."""
    trainable = [k for k in params if k in set(trainable)]
    best = layers.copy_params(params)
    if cfg.epochs <= 0:
        return best
    sign = 1.0 if mode == "min" else -1.0
    state = ad.AdamState()
    rng = np.random.default_rng(cfg.seed)

    def record(epoch, train_loss):
        row = {"epoch": epoch, "train_loss": train_loss, **evaluate(params)}
        report.history.append(row)
        log.info("%s epoch %d: %s", report.regime, epoch, row)
        return row[metric_key]

    best_value = record(0, None)
    report.best_epoch, report.best_value = 0, best_value
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for batch in make_batches(corpus, cfg.token_budget, seed=cfg.seed * 100_003 + epoch):
            tape = ad.Tape()
            P = ad.watch_all(tape, params, trainable)
            loss = loss_fn(P, batch, rng)
            if not loss.is_finite():
                raise TrainingDiverged(f"{report.regime}: non-finite loss in epoch {epoch}", report)
            grads = tape.gradient(loss, {k: P[k] for k in trainable})
            ad.adam_step(params, grads, state, cfg.lr, weight_decay=cfg.weight_decay)
            total += loss.item()
            count += 1
        if after_epoch is not None:
            after_epoch(epoch)
        value = record(epoch, total / max(count, 1))
        if sign * value < sign * best_value:
            best_value = value
            best = layers.copy_params(params)
            report.best_epoch, report.best_value = epoch, value
    return best


def decode_max_len(source) -> int:
    return 2 * len(source) + 2


# ---------------------------------------------------------------- teacher

def train_teacher(corpus: ParallelCorpus, dev: ParallelCorpus, cfg: TrainConfig,
                  hyper: TeacherHyper | None = None) -> tuple[TeacherModel, ExperimentReport]:
    """Teacher-forced cross-entropy; checkpoint chosen by dev BLEU of greedy decoding."""
    if len(corpus) == 0:
        raise ValueError("empty training corpus")
    hyper = hyper or TeacherHyper(len(corpus.vocab_src), len(corpus.vocab_tgt), dropout=cfg.dropout)
    model = TeacherModel.init(hyper, cfg.seed)
    report = ExperimentReport("teacher", cfg.as_dict(), "dev-bleu")
    V = hyper.tgt_vocab

    def loss_fn(P, batch, rng):
        out = onehot(batch.targets, V)
        e = sequence_energies(model, batch.sources, batch.source_lengths, out[:, :-1], out,
                              batch.target_lengths, P, train=True, rng=rng)
        return ad.mul(ad.sum_(e), 1.0 / batch.n_target_tokens)

    max_len = max(decode_max_len(s) for s in dev.sources)

    def evaluate(params):
        probe = TeacherModel(hyper, params)
        hyps = greedy_decode_batch(probe, dev.sources, max_len)
        nll = score_sequences(probe, dev.sources, dev.targets).sum() / sum(len(t) for t in dev.targets)
        return {"dev-bleu": bleu([strip_eos(h) for h in hyps], [strip_eos(t) for t in dev.targets]),
                "dev-nll": float(nll)}

    best = fit(model.params, list(model.params), loss_fn, corpus, cfg, evaluate, "dev-bleu", "max", report)
    return TeacherModel(hyper, best), report


# ---------------------------------------------------------------- distillation

def distill_targets(teacher: TeacherModel, sources, beam: int = 5):
    """Beam-search outputs for each source; returns ``(targets, n_fallbacks)``."""
    targets, fallbacks = [], 0
    for x in sources:
        max_len = decode_max_len(x)
        y = beam_search(teacher, x, beam, max_len)
        if not y or y[-1] != EOS:
            fallbacks += 1
            y = greedy_decode(teacher, x, max_len)
            if not y or y[-1] != EOS:
                y = y[:max_len - 1] + [EOS]
        targets.append(y)
    return targets, fallbacks


def distill(teacher: TeacherModel, corpus: ParallelCorpus, beam: int = 5) -> ParallelCorpus:
    """Replace every target by the teacher's beam-search output."""
    targets, fallbacks = distill_targets(teacher, corpus.sources, beam)
    if fallbacks:
        log.warning("distill: %d of %d sources fell back to greedy decoding", fallbacks, len(corpus))
    return corpus.with_targets(targets)


# ---------------------------------------------------------------- NAT baselines

def default_infnet_hyper(corpus: ParallelCorpus, arch: str, dropout: float = 0.1) -> InfNetHyper:
    return InfNetHyper(arch, len(corpus.vocab_src), len(corpus.vocab_tgt),
                       max_len_for(corpus.max_source_len()), dropout=dropout)


def _length_nll(length_logp, lengths):
    B = len(lengths)
    pick = np.zeros(length_logp.shape)
    pick[np.arange(B), np.asarray(lengths) - 1] = 1.0
    return ad.mul(ad.sum_(ad.mul(length_logp, pick)), -1.0 / B)


def oracle_decode(net: InferenceNetwork, corpus: ParallelCorpus):
    return argmax_decode_batch(net, corpus.sources, [len(t) for t in corpus.targets])[0]


def nat_dev_bleu(net: InferenceNetwork, dev: ParallelCorpus) -> float:
    hyps = oracle_decode(net, dev)
    return bleu([strip_eos(h) for h in hyps], [strip_eos(t) for t in dev.targets])


def train_nat_baseline(corpus: ParallelCorpus, dev: ParallelCorpus, arch: str, cfg: TrainConfig,
                       hyper: InfNetHyper | None = None) -> tuple[InferenceNetwork, ExperimentReport]:
    """Per-position cross-entropy at oracle length plus the length-head loss.

    The masked-conditional network sees partially masked targets: for each
    sentence a uniform count in 1..L of positions is masked and only those
    positions are scored. Checkpoint chosen by dev BLEU at oracle length.
    """
    if len(corpus) == 0:
        raise ValueError("empty training corpus")
    hyper = hyper or default_infnet_hyper(corpus, arch, cfg.dropout)
    net = InferenceNetwork.init(hyper, cfg.seed)
    report = ExperimentReport(f"baseline-{arch}", cfg.as_dict(), "dev-bleu")
    V = hyper.tgt_vocab

    def loss_fn(P, batch, rng):
        tgt, lens = batch.targets, batch.target_lengths
        B, L = tgt.shape
        valid = layers.length_mask(lens, L)
        observed = None
        if hyper.arch == "masked-conditional":
            scored = np.zeros((B, L))
            for b, l in enumerate(lens):
                k = int(rng.integers(1, l + 1))
                scored[b, rng.permutation(int(l))[:k]] = 1.0
            observed = np.where(scored > 0, MASK, tgt)
        else:
            scored = valid
        out = forward_batch(net, batch.sources, batch.source_lengths, lens, P, observed, True, rng)
        logp = ad.log_softmax(out.logits)
        ce = ad.mul(ad.sum_(ad.mul(logp, onehot(tgt, V) * scored[:, :, None])), -1.0 / scored.sum())
        return ad.add(ce, _length_nll(out.length_logp, lens))

    def evaluate(params):
        return {"dev-bleu": nat_dev_bleu(InferenceNetwork(hyper, params), dev)}

    best = fit(net.params, list(net.params), loss_fn, corpus, cfg, evaluate, "dev-bleu", "max", report)
    return InferenceNetwork(hyper, best), report


# ---------------------------------------------------------------- ENGINE

def nat_dev_metrics(teacher: TeacherModel, net: InferenceNetwork, dev: ParallelCorpus) -> dict:
    """Dev energy of the argmax outputs at oracle length (exact -log p, i.e. O2 = STL)
    and their BLEU."""
    res = evaluate_outputs(teacher, dev, oracle_decode(net, dev))
    return {"dev-energy": res.mean_energy, "dev-bleu": res.bleu}


def train_engine(teacher: TeacherModel, corpus: ParallelCorpus, dev: ParallelCorpus,
                 init_net: InferenceNetwork, cfg: TrainConfig) -> tuple[InferenceNetwork, ExperimentReport]:
    """Minimise the teacher's generalized energy of the network's logits at oracle lengths.

    Only target lengths are read from ``corpus``; target tokens are never used.
    The teacher enters as constants, so it receives no gradient; its parameter
    digest is checked after every epoch. The length head stays frozen.
    """
    digest = layers.params_digest(teacher.params)
    hyper = init_net.hyper
    params = layers.copy_params(init_net.params)
    trainable = [k for k in params if k not in LENGTH_PARAMS]
    report = ExperimentReport("engine", cfg.as_dict(), cfg.early_stop_metric)
    net = InferenceNetwork(hyper, params)

    def loss_fn(P, batch, rng):
        out = forward_batch(net, batch.sources, batch.source_lengths, batch.target_lengths, P,
                            train=True, rng=rng)
        e = batch_generalized_energy(teacher, batch.sources, batch.source_lengths, out.logits,
                                     batch.target_lengths, cfg.o1, cfg.o2, rng)
        return ad.mul(ad.sum_(e), 1.0 / batch.n_target_tokens)

    def evaluate(p):
        return nat_dev_metrics(teacher, InferenceNetwork(hyper, p), dev)

    def check_teacher(epoch):
        if layers.params_digest(teacher.params) != digest:
            raise AssertionError(f"teacher parameters changed during ENGINE epoch {epoch}")

    mode = "min" if cfg.early_stop_metric == "dev-energy" else "max"
    best = fit(params, trainable, loss_fn, corpus, cfg, evaluate, cfg.early_stop_metric, mode, report,
               after_epoch=check_teacher)
    return InferenceNetwork(hyper, best), report


# ---------------------------------------------------------------- operator grid

@dataclass
class GridResult:
    cells: dict  # (o1, o2) -> {"energy": float, "bleu": float} or {"error": str}

    def energy(self, o1, o2) -> float:
        return self.cells[(OperatorKind.parse(o1).value, OperatorKind.parse(o2).value)]["energy"]

    def row_mean(self, o1) -> float:
        o1 = OperatorKind.parse(o1).value
        vals = [c["energy"] for (r, _), c in self.cells.items() if r == o1 and "energy" in c]
        return float(np.mean(vals))

    def min_energy(self) -> float:
        return min(c["energy"] for c in self.cells.values() if "energy" in c)

    def to_tsv(self) -> str:
        """Rows are O1, columns O2; each cell reads ``energy (bleu)``."""
        kinds = [k.value for k in ALL_KINDS]
        lines = ["O1\\O2\t" + "\t".join(kinds)]
        for r in kinds:
            cells = []
            for c in kinds:
                cell = self.cells.get((r, c), {"error": "missing"})
                cells.append(f"{cell['energy']:.2f} ({cell['bleu']:.1f})" if "energy" in cell else "ERR")
            lines.append(r + "\t" + "\t".join(cells))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({f"{r},{c}": v for (r, c), v in sorted(self.cells.items())}, indent=2, sort_keys=True)


def _grid_cell(args):
    teacher, corpus, dev, init_net, cfg = args
    try:
        net, report = train_engine(teacher, corpus, dev, init_net, cfg)
        metrics = nat_dev_metrics(teacher, net, dev)
        if not all(math.isfinite(v) for v in metrics.values()):
            return {"error": "non-finite metrics"}
        return {"energy": metrics["dev-energy"], "bleu": metrics["dev-bleu"],
                "best_epoch": report.best_epoch}
    except Exception as exc:  # a failed cell must not stop the grid
        log.exception("grid cell %s/%s failed", cfg.o1.value, cfg.o2.value)
        return {"error": f"{type(exc).__name__}: {exc}"}


def operator_grid(teacher: TeacherModel, corpus: ParallelCorpus, dev: ParallelCorpus,
                  init_net: InferenceNetwork, cfg: TrainConfig, jobs: int = 1) -> GridResult:
    """One ENGINE run per (O1, O2) pair with otherwise identical configuration."""
    keys = [(r, c) for r in ALL_KINDS for c in ALL_KINDS]
    tasks = [(teacher, corpus, dev, init_net, replace(cfg, o1=r, o2=c)) for r, c in keys]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_grid_cell, tasks))
    else:
        results = [_grid_cell(t) for t in tasks]
    return GridResult({(r.value, c.value): res for (r, c), res in zip(keys, results)})
