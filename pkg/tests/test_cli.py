import json

import pytest

from fashionbert.cli import main
from fashionbert.model import load_checkpoint
from fashionbert.training import read_log

TINY = ["--set", "num_layers=1", "--set", "hidden=16", "--set", "heads=2", "--set", "ff=32", "--set", "max_text_len=32"]


def test_solve_weights(capsys):
    assert main(["solve-weights", "0.9", "0.5", "0.1"]) == 0
    assert capsys.readouterr().out.split() == ["0.39544", "0.31492", "0.28964"]


def test_solve_weights_verify(capsys):
    assert main(["solve-weights", "--verify", "0.0", "0.99"]) == 0
    assert "max gap" in capsys.readouterr().out


def test_solve_weights_domain_error(capsys):
    assert main(["solve-weights", "1.5", "0.2"]) == 1
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv, needle",
    [
        (["gen-data"], "--out"),
        (["pretrain", "--out", "x"], "--data"),
        (["gen-data", "--out", "x", "--set", "colour=red"], "colour"),
        (["gen-data", "--out", "x", "--set", "count=many"], "count"),
    ],
)
def test_usage_errors(argv, needle, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    assert needle in capsys.readouterr().err


def test_config_file_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("count = 10\nbogus = 1\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert "bogus" in capsys.readouterr().err


def test_pipeline(tmp_path, capsys):
    d, v, r, e, b = (tmp_path / n for n in ("data", "vocab", "run", "eval", "bench"))
    assert main(["gen-data", "--out", str(d), "--count", "150", "--image-size", "32", "--seed", "1"]) == 0
    assert main(["build-vocab", "--data", str(d), "--out", str(v)]) == 0
    assert main(["pretrain", "--data", str(d), "--vocab", str(v / "vocab.txt"), "--out", str(r),
                 "--steps", "20", "--warmup", "5", "--batch-size", "8", "--weighting", "fixed", *TINY]) == 0
    rows = read_log(r / "train_log.csv")
    assert len(rows) == 20
    assert all(row["w_mlm"] == row["w_mpm"] == row["w_tia"] == 1 / 3 for row in rows)
    manifest = json.loads((r / "manifest.json").read_text())
    assert manifest["config"]["weighting"] == "fixed" and manifest["config"]["hidden"] == 16
    assert load_checkpoint(r / "checkpoint.bin").config.hidden == 16

    common = ["--data", str(d), "--vocab", str(v / "vocab.txt"), "--checkpoint", str(r / "checkpoint.bin")]
    assert main(["eval", *common, "--out", str(e), "--queries", "5", "--distractors", "10"]) == 0
    assert (e / "report.csv").read_text().count("\n") == 3
    assert main(["bench-vsl", *common, "--out", str(b), "--repetitions", "1", "--set", "bench_warmup=0"]) == 0
    assert (b / "bench.csv").read_text().splitlines()[0] == "mode,batch_size,mean_ms,p50_ms,p95_ms"
