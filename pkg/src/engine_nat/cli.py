"""Command-line pipeline.

Every subcommand reads a flat ``key = value`` config (``--config``), applies
``--key value`` overrides, runs one step and writes its artifacts plus a
``manifest.json`` into the ``out`` directory. Data directories hold
``{train,dev,test}.{src,tgt}`` and ``vocab.{src,tgt}``.

    python3 -m engine_nat gen-data --out data --task shifted-substitution
    python3 -m engine_nat train-teacher --data data --out teacher --lr 3e-3
    python3 -m engine_nat grid --config grid.cfg --jobs 4
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

from . import training as tr
from .corpus import (TASKS, ParallelCorpus, Vocabulary, generate_synthetic, read_parallel,
                     write_parallel)
from .evaluation import bleu, evaluate_outputs, strip_eos
from .infnet import ARCHS, InferenceNetwork, decode_length_beam_batch, mask_predict_batch
from .operators import OperatorKind
from .teacher import TeacherHyper, TeacherModel, read_kv

log = logging.getLogger("engine_nat")

SPLITS = ("train", "dev", "test")


class ConfigError(ValueError):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v) -> list[int]:
    return [int(t) for t in str(v).split(",") if t.strip()]


def _op(v) -> str:
    return OperatorKind.parse(v).value


# key -> (type, default); default None means required when the command uses the key
COMMON = {"out": (str, None), "seed": (int, 0), "log_level": (str, "INFO")}
TRAIN = {"lr": (float, 1e-4), "epochs": (int, 30), "token_budget": (int, 1024),
         "weight_decay": (float, 0.01), "dropout": (float, 0.1)}
DECODE = {"split": (str, "dev"), "oracle_length": (_bool, True), "length_beam": (int, 3),
          "iterations": (_ints, [1])}
NET = {"emb": (int, 32), "hidden": (int, 32), "n_layers": (int, 1)}

SCHEMAS = {
    "gen-data": {"task": (str, "shifted-substitution"), "vocab_size": (int, 20),
                 "n_train": (int, 2000), "n_dev": (int, 200), "n_test": (int, 200),
                 "len_min": (int, 3), "len_max": (int, 8), "alt_rate": (float, 0.0)},
    "train-teacher": {"data": (str, None), **TRAIN, "emb": (int, 32), "enc_hidden": (int, 32),
                      "dec_hidden": (int, 64)},
    "distill": {"data": (str, None), "teacher": (str, None), "beam": (int, 5),
                "split": (str, "train")},
    "train-nat": {"data": (str, None), "arch": (str, "birnn-tagger"), **TRAIN, **NET},
    "train-engine": {"data": (str, None), "teacher": (str, None), "init": (str, None),
                     "o1": (_op, "sx"), "o2": (_op, "st"), **TRAIN},
    "grid": {"data": (str, None), "teacher": (str, None), "init": (str, None), "jobs": (int, 1),
             **TRAIN},
    "evaluate": {"data": (str, None), "teacher": (str, None), "regimes": (str, None),
                 "baseline": (str, ""), "distill": (str, ""), "engine": (str, ""), **DECODE},
    "decode": {"data": (str, None), "net": (str, None), **DECODE},
    "refine-eval": {"data": (str, None), "teacher": (str, ""), "nets": (str, None), **DECODE,
                    "iterations": (_ints, [1, 10])},
}


@dataclass
class Config:
    command: str
    values: dict
    path: str | None

    def __getitem__(self, key):
        return self.values[key]

    def train_config(self, **kw) -> tr.TrainConfig:
        v = self.values
        return tr.TrainConfig(lr=v["lr"], epochs=v["epochs"], token_budget=v["token_budget"],
                              weight_decay=v["weight_decay"], dropout=v["dropout"], seed=v["seed"], **kw)


def resolve_config(command: str, path: str | None, overrides: dict) -> Config:
    """Merge defaults < config file < overrides and type-check every key."""
    schema = {**COMMON, **SCHEMAS[command]}
    raw: dict = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        raw.update(read_kv(path))
    raw.update({k: v for k, v in overrides.items() if v is not None})
    values = {}
    for key in raw:
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} for {command}")
    for key, (typ, default) in schema.items():
        if key in raw:
            try:
                values[key] = typ(raw[key])
            except ValueError as exc:
                raise ConfigError(f"invalid value for config key {key!r}: {exc}") from None
        elif default is None:
            raise ConfigError(f"missing config key {key!r}")
        else:
            values[key] = default
    return Config(command, values, path)


# ---------------------------------------------------------------- artifacts

def load_split(data_dir, split: str) -> ParallelCorpus:
    d = Path(data_dir)
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
    if not (d / f"{split}.src").is_file():
        raise FileNotFoundError(f"{d / split}.src not found")
    return read_parallel(d / split, Vocabulary.load(d / "vocab.src"), Vocabulary.load(d / "vocab.tgt"))


def load_teacher(stem) -> TeacherModel:
    return TeacherModel.load(stem)


def load_net(stem, teacher: TeacherModel | None = None) -> InferenceNetwork:
    net = InferenceNetwork.load(stem)
    if teacher is not None and net.vocab_size != teacher.vocab_size:
        raise ValueError(f"checkpoint {stem} has target vocabulary {net.vocab_size}, "
                         f"teacher has {teacher.vocab_size}")
    return net


class Run:
    """Tracks inputs and outputs of one subcommand and writes the manifest."""

    def __init__(self, cfg: Config):
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.started = time.time()

    def input(self, path) -> str:
        self.inputs.append(str(path))
        return str(path)

    def write(self, name: str, text: str) -> Path:
        p = self.out / name
        p.write_text(text, encoding="utf-8")
        self.outputs.append(str(p))
        return p

    def produced(self, *paths) -> None:
        self.outputs.extend(str(p) for p in paths)

    def report(self, stem: str, report: tr.ExperimentReport) -> None:
        self.write(stem + ".json", report.to_json() + "\n")
        self.write(stem + ".tsv", report.to_tsv())

    def finish(self) -> Path:
        for p in self.outputs:
            if not Path(p).exists():
                raise RuntimeError(f"artifact {p} was not produced")
        manifest = {"command": self.cfg.command, "config_path": self.cfg.path,
                    "seed": self.cfg["seed"], "config": _jsonable(self.cfg.values),
                    "inputs": self.inputs, "outputs": self.outputs,
                    "started": self.started, "finished": time.time()}
        p = self.out / "manifest.json"
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p


def _jsonable(values: dict) -> dict:
    return {k: v if isinstance(v, (int, float, str, bool, list)) or v is None else str(v)
            for k, v in values.items()}


def _table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "".join("\t".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n" for r in rows)


# ---------------------------------------------------------------- decoding helper

def nat_decode(net: InferenceNetwork, corpus: ParallelCorpus, oracle_length: bool, length_beam: int,
               iterations: int) -> list[list[int]]:
    if oracle_length:
        return mask_predict_batch(net, corpus.sources, [len(t) for t in corpus.targets], iterations)[0]
    return decode_length_beam_batch(net, corpus.sources, length_beam, iterations=iterations)


def _single_iterations(cfg: Config) -> int:
    its = cfg["iterations"]
    if len(its) != 1:
        raise ConfigError(f"{cfg.command} takes a single iteration count, got {its}")
    return its[0]


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(cfg: Config, run: Run) -> None:
    if cfg["task"] not in TASKS:
        raise ConfigError(f"invalid value for config key 'task': {cfg['task']!r}")
    seed = cfg["seed"]
    for i, split in enumerate(SPLITS):
        corpus = generate_synthetic(cfg["task"], cfg[f"n_{split}"], (cfg["len_min"], cfg["len_max"]),
                                    cfg["vocab_size"], seed * 10 + i, alt_rate=cfg["alt_rate"])
        write_parallel(corpus, run.out / split)
        run.produced(run.out / f"{split}.src", run.out / f"{split}.tgt")
    corpus.vocab_src.save(run.out / "vocab.src")
    corpus.vocab_tgt.save(run.out / "vocab.tgt")
    run.produced(run.out / "vocab.src", run.out / "vocab.tgt")


def cmd_train_teacher(cfg: Config, run: Run) -> None:
    train = load_split(run.input(cfg["data"]), "train")
    dev = load_split(cfg["data"], "dev")
    hyper = TeacherHyper(len(train.vocab_src), len(train.vocab_tgt), cfg["emb"], cfg["enc_hidden"],
                         cfg["dec_hidden"], cfg["dropout"])
    teacher, report = tr.train_teacher(train, dev, cfg.train_config(early_stop_metric="dev-bleu"), hyper)
    teacher.save(run.out / "teacher")
    run.produced(run.out / "teacher.params", run.out / "teacher.config")
    run.report("report", report)


def cmd_distill(cfg: Config, run: Run) -> None:
    teacher = load_teacher(run.input(cfg["teacher"]))
    data = Path(run.input(cfg["data"]))
    for split in SPLITS:
        corpus = load_split(data, split)
        if split == cfg["split"]:
            targets, fallbacks = tr.distill_targets(teacher, corpus.sources, cfg["beam"])
            corpus = corpus.with_targets(targets)
            run.write("distill.json", json.dumps({"split": split, "n": len(corpus),
                                                  "fallbacks": fallbacks}, indent=2) + "\n")
        write_parallel(corpus, run.out / split)
        run.produced(run.out / f"{split}.src", run.out / f"{split}.tgt")
    for name in ("vocab.src", "vocab.tgt"):
        shutil.copyfile(data / name, run.out / name)
        run.produced(run.out / name)


def cmd_train_nat(cfg: Config, run: Run) -> None:
    if cfg["arch"] not in ARCHS:
        raise ConfigError(f"invalid value for config key 'arch': {cfg['arch']!r}")
    train = load_split(run.input(cfg["data"]), "train")
    dev = load_split(cfg["data"], "dev")
    hyper = replace(tr.default_infnet_hyper(train, cfg["arch"], cfg["dropout"]),
                    emb=cfg["emb"], hidden=cfg["hidden"], n_layers=cfg["n_layers"])
    net, report = tr.train_nat_baseline(train, dev, cfg["arch"],
                                        cfg.train_config(early_stop_metric="dev-bleu"), hyper)
    net.save(run.out / "net")
    run.produced(run.out / "net.params", run.out / "net.config")
    run.report("report", report)


def _engine_inputs(cfg: Config, run: Run):
    teacher = load_teacher(run.input(cfg["teacher"]))
    init = load_net(run.input(cfg["init"]), teacher)
    train = load_split(run.input(cfg["data"]), "train")
    dev = load_split(cfg["data"], "dev")
    return teacher, init, train, dev


def cmd_train_engine(cfg: Config, run: Run) -> None:
    teacher, init, train, dev = _engine_inputs(cfg, run)
    net, report = tr.train_engine(teacher, train, dev, init, cfg.train_config(o1=cfg["o1"], o2=cfg["o2"]))
    net.save(run.out / "net")
    run.produced(run.out / "net.params", run.out / "net.config")
    run.report("report", report)


def cmd_grid(cfg: Config, run: Run) -> None:
    teacher, init, train, dev = _engine_inputs(cfg, run)
    grid = tr.operator_grid(teacher, train, dev, init, cfg.train_config(), jobs=cfg["jobs"])
    run.write("grid.tsv", grid.to_tsv())
    run.write("grid.json", grid.to_json() + "\n")
    print(grid.to_tsv(), end="")


def cmd_evaluate(cfg: Config, run: Run) -> None:
    teacher = load_teacher(run.input(cfg["teacher"]))
    corpus = load_split(run.input(cfg["data"]), cfg["split"])
    iterations = _single_iterations(cfg)
    regimes = [r.strip() for r in cfg["regimes"].split(",") if r.strip()]
    rows, results = [["regime", "energy", "bleu"]], {}
    for regime in regimes:
        if regime not in ("baseline", "distill", "engine"):
            raise ConfigError(f"invalid value for config key 'regimes': unknown regime {regime!r}")
        if not cfg[regime]:
            raise ConfigError(f"missing config key {regime!r}")
        net = load_net(run.input(cfg[regime]), teacher)
        hyps = nat_decode(net, corpus, cfg["oracle_length"], cfg["length_beam"], iterations)
        res = evaluate_outputs(teacher, corpus, hyps)
        results[regime] = res.as_dict()
        rows.append([regime, f"{res.mean_energy:.2f}", f"{res.bleu:.2f}"])
    run.write("eval.tsv", _table(rows))
    run.write("eval.json", json.dumps({"split": cfg["split"], "results": results}, indent=2) + "\n")
    print(_table(rows), end="")


def cmd_decode(cfg: Config, run: Run) -> None:
    net = load_net(run.input(cfg["net"]))
    corpus = load_split(run.input(cfg["data"]), cfg["split"])
    hyps = nat_decode(net, corpus, cfg["oracle_length"], cfg["length_beam"], _single_iterations(cfg))
    vocab = corpus.vocab_tgt
    run.write("hyps.txt", "".join(" ".join(vocab.decode(strip_eos(h))) + "\n" for h in hyps))
    score = bleu([strip_eos(h) for h in hyps], [strip_eos(t) for t in corpus.targets])
    run.write("decode.json", json.dumps({"split": cfg["split"], "bleu": score, "n": len(hyps)}, indent=2) + "\n")


def _parse_nets(value: str) -> list[tuple[str, str]]:
    out = []
    for item in (s.strip() for s in value.split(",")):
        if not item:
            continue
        label, _, stem = item.rpartition(":") if ":" in item else (Path(item).name, "", item)
        out.append((label, stem))
    if not out:
        raise ConfigError("invalid value for config key 'nets': empty")
    return out


def cmd_refine_eval(cfg: Config, run: Run) -> None:
    """BLEU per network (rows) and refinement iteration count (columns)."""
    corpus = load_split(run.input(cfg["data"]), cfg["split"])
    teacher = load_teacher(run.input(cfg["teacher"])) if cfg["teacher"] else None
    its = cfg["iterations"]
    rows, results = [["net"] + [f"iter={n}" for n in its]], {}
    for label, stem in _parse_nets(cfg["nets"]):
        net = load_net(run.input(stem), teacher)
        if net.arch != "masked-conditional" and any(n > 1 for n in its):
            raise ValueError(f"checkpoint {stem}: refinement requires masked-conditional, got {net.arch}")
        results[label] = {}
        for n in its:
            hyps = nat_decode(net, corpus, cfg["oracle_length"], cfg["length_beam"], n)
            r = {"bleu": bleu([strip_eos(h) for h in hyps], [strip_eos(t) for t in corpus.targets])}
            if teacher is not None:
                r = evaluate_outputs(teacher, corpus, hyps).as_dict()
            results[label][str(n)] = r
        rows.append([label] + [f"{results[label][str(n)]['bleu']:.2f}" for n in its])
    run.write("refine.tsv", _table(rows))
    run.write("refine.json", json.dumps({"split": cfg["split"], "results": results}, indent=2) + "\n")
    print(_table(rows), end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "train-nat": cmd_train_nat,
    "train-engine": cmd_train_engine,
    "grid": cmd_grid,
    "evaluate": cmd_evaluate,
    "decode": cmd_decode,
    "refine-eval": cmd_refine_eval,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="engine_nat", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--o1", choices=[k.value for k in OperatorKind])
    p.add_argument("--o2", choices=[k.value for k in OperatorKind])
    p.add_argument("--iterations", help="comma-separated refinement iteration counts")
    p.add_argument("--length-beam", type=int)
    p.add_argument("--oracle-length")
    return p


def parse_overrides(rest: list[str]) -> dict:
    """``--key value`` pairs beyond the named flags; hyphens in keys become underscores."""
    out, i = {}, 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(rest):
            value = rest[i + 1]
            i += 2
        else:
            raise ConfigError(f"flag {tok} needs a value")
        out[key.replace("-", "_")] = value
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        overrides = parse_overrides(rest)
        named = {"seed": args.seed, "jobs": args.jobs, "o1": args.o1, "o2": args.o2,
                 "iterations": args.iterations, "length_beam": args.length_beam,
                 "oracle_length": args.oracle_length}
        schema = {**COMMON, **SCHEMAS[args.command]}
        for key, value in named.items():
            if value is not None and key not in schema:
                raise ConfigError(f"--{key.replace('_', '-')} does not apply to {args.command}")
            overrides.setdefault(key, value)
        cfg = resolve_config(args.command, args.config, overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=cfg["log_level"].upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(cfg)
        COMMANDS[args.command](cfg, run)
        run.finish()
    except (ConfigError, ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
