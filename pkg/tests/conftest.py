import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from engine_nat.infnet import InferenceNetwork, InfNetHyper
from engine_nat.teacher import TeacherHyper, TeacherModel

settings.register_profile("engine", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("engine")

# criterion id -> (passed, detail); filled by the acceptance module
ACCEPTANCE: dict = {}


def random_teacher(src_vocab=9, tgt_vocab=8, seed=0, scale=3.0, dropout=0.0) -> TeacherModel:
    """Small untrained teacher with its output layer scaled up so distributions are peaked."""
    t = TeacherModel.init(TeacherHyper(src_vocab, tgt_vocab, emb=6, enc_hidden=4, dec_hidden=8,
                                       dropout=dropout), seed)
    t.params["dec.out.W"] = t.params["dec.out.W"] * scale
    return t


def random_net(arch="masked-conditional", src_vocab=9, tgt_vocab=8, max_len=12, seed=0, n_layers=1):
    hyper = InfNetHyper(arch, src_vocab, tgt_vocab, max_len, emb=8, hidden=6, n_layers=n_layers,
                        dropout=0.1)
    return InferenceNetwork.init(hyper, seed)


@pytest.fixture
def teacher():
    return random_teacher()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


# every subcommand at toy scale; paths are relative to the working directory
CLI_PIPELINE = [
    ["gen-data", "--out", "data", "--task", "shifted-substitution", "--vocab-size", "10", "--n-train", "30",
     "--n-dev", "8", "--n-test", "8", "--len-max", "4", "--len-min", "2", "--alt-rate", "0.3", "--seed", "3"],
    ["train-teacher", "--data", "data", "--out", "teacher", "--epochs", "2", "--lr", "3e-3", "--emb", "8",
     "--enc-hidden", "4", "--dec-hidden", "8", "--token-budget", "64"],
    ["distill", "--data", "data", "--teacher", "teacher/teacher", "--out", "distilled", "--beam", "3"],
    ["train-nat", "--data", "data", "--out", "ref", "--epochs", "2", "--lr", "3e-3", "--emb", "8",
     "--hidden", "8", "--token-budget", "64"],
    ["train-nat", "--data", "distilled", "--out", "dis", "--epochs", "2", "--lr", "3e-3", "--emb", "8",
     "--hidden", "8", "--token-budget", "64"],
    ["train-nat", "--data", "data", "--out", "cmlm", "--arch", "masked-conditional", "--epochs", "2",
     "--lr", "3e-3", "--emb", "8", "--hidden", "8", "--token-budget", "64"],
    ["train-engine", "--data", "data", "--teacher", "teacher/teacher", "--init", "ref/net", "--out", "eng",
     "--epochs", "1", "--lr", "1e-3", "--o1", "gx", "--o2", "sg", "--token-budget", "64"],
    ["grid", "--data", "data", "--teacher", "teacher/teacher", "--init", "ref/net", "--out", "grid",
     "--epochs", "1", "--lr", "1e-3", "--jobs", "2", "--token-budget", "64"],
    ["evaluate", "--data", "data", "--teacher", "teacher/teacher", "--out", "eval",
     "--regimes", "baseline,distill,engine", "--baseline", "ref/net", "--distill", "dis/net",
     "--engine", "eng/net", "--oracle-length", "false"],
    ["decode", "--data", "data", "--net", "cmlm/net", "--out", "decoded", "--split", "test",
     "--iterations", "3"],
    ["refine-eval", "--data", "data", "--teacher", "teacher/teacher", "--nets", "cmlm:cmlm/net",
     "--out", "refine", "--iterations", "1,2"],
]


def run_cli_pipeline() -> None:
    from engine_nat.cli import main
    for argv in CLI_PIPELINE:
        assert main(argv) == 0, argv
