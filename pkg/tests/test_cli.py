import json
import math
import subprocess
import sys
from pathlib import Path

import pytest

from engine_nat import cli
from engine_nat.cli import ConfigError, main, parse_overrides, resolve_config

from conftest import run_cli_pipeline


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    with pytest.MonkeyPatch.context() as mp:
        mp.chdir(root)
        run_cli_pipeline()
    return root


def test_every_subcommand_writes_a_manifest(pipeline):
    for d in ["data", "teacher", "distilled", "ref", "dis", "cmlm", "eng", "grid", "eval", "decoded", "refine"]:
        m = json.loads((pipeline / d / "manifest.json").read_text())
        assert m["seed"] == (3 if d == "data" else 0)
        for p in m["outputs"]:
            assert (pipeline / p).exists()


def test_data_directory_layout(pipeline):
    names = sorted(p.name for p in (pipeline / "data").iterdir())
    assert names == ["dev.src", "dev.tgt", "manifest.json", "test.src", "test.tgt", "train.src",
                     "train.tgt", "vocab.src", "vocab.tgt"]
    assert len((pipeline / "data" / "train.src").read_text().splitlines()) == 30


def test_distill_rewrites_only_the_chosen_split(pipeline):
    assert (pipeline / "distilled" / "dev.tgt").read_text() == (pipeline / "data" / "dev.tgt").read_text()
    info = json.loads((pipeline / "distilled" / "distill.json").read_text())
    assert info["split"] == "train" and info["n"] == 30


def test_grid_table(pipeline):
    lines = (pipeline / "grid" / "grid.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["O1\\O2", "sx", "stl", "sg", "st", "gx"]
    cells = json.loads((pipeline / "grid" / "grid.json").read_text())
    assert len(cells) == 25 and all(math.isfinite(c["energy"]) for c in cells.values())


def test_evaluate_untrained_nets(pipeline):
    res = json.loads((pipeline / "eval" / "eval.json").read_text())["results"]
    assert sorted(res) == ["baseline", "distill", "engine"]
    for r in res.values():
        assert math.isfinite(r["mean_energy"]) and 0.0 <= r["bleu"] <= 100.0
    header = (pipeline / "eval" / "eval.tsv").read_text().splitlines()[0].split()
    assert header == ["regime", "energy", "bleu"]


def test_decode_and_refine_outputs(pipeline):
    assert len((pipeline / "decoded" / "hyps.txt").read_text().splitlines()) == 8
    head = (pipeline / "refine" / "refine.tsv").read_text().splitlines()[0].split()
    assert head == ["net", "iter=1", "iter=2"]


def test_refine_eval_rejects_tagger(pipeline, monkeypatch, capsys):
    monkeypatch.chdir(pipeline)
    assert main(["refine-eval", "--data", "data", "--nets", "ref/net", "--out", "r2"]) == 1
    assert "refinement requires masked-conditional" in capsys.readouterr().err


def test_teacher_is_not_a_network(pipeline, monkeypatch, capsys):
    monkeypatch.chdir(pipeline)
    assert main(["decode", "--data", "data", "--net", "teacher/teacher", "--out", "d2"]) == 1
    assert "does not describe an inference network" in capsys.readouterr().err


def test_vocabulary_mismatch(pipeline, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(pipeline)
    assert main(["gen-data", "--out", str(tmp_path / "big"), "--vocab-size", "14", "--n-train", "5",
                 "--n-dev", "2", "--n-test", "2"]) == 0
    assert main(["train-nat", "--data", str(tmp_path / "big"), "--out", str(tmp_path / "bignet"),
                 "--epochs", "0"]) == 0
    rc = main(["train-engine", "--data", "data", "--teacher", "teacher/teacher",
               "--init", str(tmp_path / "bignet" / "net"), "--out", str(tmp_path / "e")])
    assert rc == 1 and "target vocabulary" in capsys.readouterr().err


def test_missing_key_is_named(capsys):
    assert main(["train-teacher", "--out", "x"]) == 2
    assert "missing config key 'data'" in capsys.readouterr().err


def test_unknown_key_is_named(capsys):
    assert main(["decode", "--out", "x", "--data", "d", "--net", "n", "--beam-size", "4"]) == 2
    assert "unknown config key 'beam_size'" in capsys.readouterr().err


def test_named_flag_for_wrong_command(capsys):
    assert main(["gen-data", "--out", "x", "--o1", "sx"]) == 2
    assert "--o1 does not apply to gen-data" in capsys.readouterr().err


def test_bad_values(capsys):
    with pytest.raises(ConfigError, match="invalid value for config key 'epochs'"):
        resolve_config("train-nat", None, {"out": "o", "data": "d", "epochs": "many"})
    with pytest.raises(ConfigError, match="'o1'"):
        resolve_config("train-engine", None, {"out": "o", "data": "d", "teacher": "t", "init": "i",
                                              "o1": "softplus"})


def test_config_file_then_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# engine run\ndata = d\nteacher = t\ninit = i\nout = o\nlr = 5e-5\no1 = gx\n")
    cfg = resolve_config("train-engine", str(path), {"lr": "1e-5"})
    assert cfg["lr"] == 1e-5 and cfg["o1"] == "gx" and cfg["o2"] == "st"
    assert cfg["epochs"] == 30 and cfg["weight_decay"] == 0.01
    with pytest.raises(ConfigError, match="not found"):
        resolve_config("train-engine", str(tmp_path / "nope.cfg"), {})


def test_parse_overrides():
    assert parse_overrides(["--token-budget", "64", "--lr=1e-3"]) == {"token_budget": "64", "lr": "1e-3"}
    with pytest.raises(ConfigError, match="needs a value"):
        parse_overrides(["--lr"])
    with pytest.raises(ConfigError, match="unexpected argument"):
        parse_overrides(["lr"])


def test_iterations_list_and_bool():
    cfg = resolve_config("refine-eval", None, {"out": "o", "data": "d", "nets": "a", "oracle_length": "no"})
    assert cfg["iterations"] == [1, 10] and cfg["oracle_length"] is False
    assert cli._parse_nets("x:a/b, c/net") == [("x", "a/b"), ("net", "c/net")]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "engine_nat", "gen-data", "--out", str(tmp_path / "d"),
                           "--n-train", "4", "--n-dev", "2", "--n-test", "2", "--log-level", "WARNING"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert Path(tmp_path / "d" / "manifest.json").exists()
