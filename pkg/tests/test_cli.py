import os

import pytest

from mgpolicy.cli import main
from mgpolicy.errors import TrainingError
from mgpolicy.harness import FILES
from mgpolicy.persist import file_sha256, load_corpus

TINY_SETS = [
    "--set", "data.episodes=3", "--set", "data.heldout=2",
    "--set", "tokenizer.codebook_size=8", "--set", "tokenizer.code_dim=4",
    "--set", "tokenizer.channels=8", "--set", "tokenizer.steps=150",
    "--set", "mgt.model_dim=32", "--set", "mgt.steps=150",
    "--set", "eval.episodes=2",
]


@pytest.fixture(scope="module")
def rundir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli"))
    base = ["--task", "reach", "--out", out] + TINY_SETS
    assert main(["collect"] + base) == 0
    assert main(["train-tokenizer"] + base) == 0
    assert main(["train-mgt"] + base) == 0
    return out, base


def test_pipeline_writes_artifacts(rundir):
    out, _ = rundir
    for name in ("corpus", "tokenizer", "tokenizer_loss", "stage1_report",
                 "mgt", "mgt_loss"):
        assert os.path.exists(f"{out}/{FILES[name]}"), name
    assert os.path.exists(f"{out}/manifest_collect.txt")
    assert os.path.exists(f"{out}/manifest_train-mgt.txt")


def test_eval_reruns_are_byte_identical(rundir):
    out, base = rundir
    assert main(["eval"] + base + ["--episodes", "2"]) == 0
    report = f"{out}/{FILES['eval_report']}"
    before = file_sha256(report)
    assert main(["eval"] + base + ["--episodes", "2"]) == 0
    assert file_sha256(report) == before


def test_eval_variant_flags(rundir):
    out, base = rundir
    rc = main(["eval"] + base + ["--episodes", "1",
                                 "--variant", "mgp-long",
                                 "--variant", "short"])
    assert rc == 0
    text = open(f"{out}/{FILES['eval_report']}").read()
    assert "long" in text and "short" in text


def test_ablate_command(rundir):
    out, base = rundir
    rc = main(["ablate"] + base
              + ["--sweep", "sampler.remask_ratio=0.5,0.85",
                 "--episodes", "1"])
    assert rc == 0
    text = open(f"{out}/{FILES['ablate_report']}").read()
    assert "0.5" in text and "0.85" in text
    assert main(["ablate"] + base + ["--sweep", "mgt.steps=1,2"]) == 2


def test_analyze_command(rundir):
    out, base = rundir
    assert main(["analyze"] + base + ["--episodes", "2"]) == 0
    assert os.path.exists(f"{out}/{FILES['confidence_summary']}")
    assert os.path.exists(f"{out}/{FILES['flip_rate']}")
    assert os.path.exists(f"{out}/confidence_000.csv")


def test_inspect_corpus_and_checkpoint(rundir, capsys):
    out, _ = rundir
    assert main(["inspect-checkpoint", f"{out}/{FILES['corpus']}"]) == 0
    text = capsys.readouterr().out
    assert "task=reach" in text and "episodes=3" in text
    assert main(["inspect-checkpoint", f"{out}/{FILES['mgt']}"]) == 0
    text = capsys.readouterr().out
    assert "config_hash=" in text and "shape=" in text


def test_config_file_route(tmp_path):
    conf = tmp_path / "exp.conf"
    conf.write_text("task = reach\ndata.episodes = 2\n")
    out = str(tmp_path / "run")
    assert main(["collect", "--config", str(conf), "--out", out]) == 0
    assert len(load_corpus(f"{out}/{FILES['corpus']}")) == 2


def test_argparse_failures_exit_2(capsys):
    assert main([]) == 2
    assert main(["collect", "--bogus"]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["--help"]) == 0
    capsys.readouterr()


def test_bad_override_exits_2(tmp_path):
    out = str(tmp_path)
    assert main(["collect", "--task", "reach", "--out", out,
                 "--set", "nope=1"]) == 2
    assert main(["collect", "--task", "reach", "--out", out,
                 "--set", "dropout.p=1.5"]) == 2


def test_missing_inputs_exit_3(tmp_path):
    out = str(tmp_path / "void")
    assert main(["train-tokenizer", "--task", "reach", "--out", out]) == 3
    assert main(["eval", "--task", "reach", "--out", out]) == 3
    assert main(["inspect-checkpoint", str(tmp_path / "nothing.ckpt")]) == 3


def test_stale_checkpoint_exits_2(rundir):
    _, base = rundir
    # a training-key override invalidates the stage-2 hash
    assert main(["eval"] + base + ["--episodes", "1",
                                   "--set", "mgt.steps=999"]) == 2


def test_corrupt_checkpoint_exits_3(rundir, tmp_path):
    out, _ = rundir
    raw = bytearray(open(f"{out}/{FILES['mgt']}", "rb").read())
    raw[len(raw) // 2] ^= 0x40
    bad = tmp_path / "mangled.ckpt"
    bad.write_bytes(bytes(raw))
    assert main(["inspect-checkpoint", str(bad)]) == 3


def test_training_divergence_exits_4(rundir, monkeypatch):
    _, base = rundir

    def blow_up(cfg):
        raise TrainingError("loss became non-finite at step 7")

    monkeypatch.setattr("mgpolicy.cli.run_stage2", blow_up)
    assert main(["train-mgt"] + base) == 4
