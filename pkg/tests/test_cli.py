import csv
import json
import subprocess
import sys

import pytest

from ccgan import cli, trainer
from ccgan.trainer import NumericalDivergence

TINY = ["--set", "data.n=128", "--set", "data.n_test=64", "--set", "batch_size=32",
        "--set", "schedule.total_epochs=2", "--set", "schedule.lr_const_epochs=1",
        "--set", "schedule.rampup_epochs=1"]


@pytest.fixture
def run_dir(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--out", str(out), *TINY]) == 0
    return out


def test_train_writes_manifest_and_artifacts(run_dir, capsys):
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["status"] == "completed"
    assert manifest["config"]["schedule"]["total_epochs"] == 2
    assert manifest["started"] and manifest["finished"] and manifest["git_describe"]
    for name in manifest["artifacts"].values():
        assert (run_dir / name).exists()


def test_manifest_reproduces_run(run_dir, tmp_path):
    again = tmp_path / "again"
    assert cli.main(["train", "--config", str(run_dir / "manifest.json"), "--out", str(again)]) == 0
    assert (again / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()


def test_eval_and_exports(run_dir, tmp_path, capsys):
    ckpt = str(run_dir / "checkpoint.ckpt")
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", ckpt]) == 0
    res = json.loads(capsys.readouterr().out)
    metrics = list(csv.DictReader(open(run_dir / "metrics.csv")))
    assert res["student_error"] == float(metrics[-1]["student_error"])
    assert cli.main(["eval", "--checkpoint", ckpt, "--dataset", "two_moons", "--split", "train"]) == 0
    rep = tmp_path / "rep.csv"
    assert cli.main(["consistency-report", "--checkpoint", ckpt, "--n-samples", "10", "--out", str(rep)]) == 0
    assert len(rep.read_text().splitlines()) == 11
    emb = tmp_path / "emb.csv"
    assert cli.main(["export-embeddings", "--checkpoint", ckpt, "--out", str(emb)]) == 0
    assert len(emb.read_text().splitlines()) == 65


def test_unknown_key_is_config_error(tmp_path, capsys):
    code = cli.main(["train", "--out", str(tmp_path), "--set", "lamda_cons=3"])
    assert code == 2
    assert "did you mean 'lambda_cons'" in capsys.readouterr().err


def test_bad_value_is_config_error(tmp_path):
    assert cli.main(["train", "--out", str(tmp_path), "--set", "consistency.kind=vat"]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2


def test_missing_data_is_data_error(tmp_path, monkeypatch):
    monkeypatch.setenv("CCGAN_DATA", str(tmp_path))
    assert cli.main(["train", "--out", str(tmp_path / "o"), "--set", "data.name=cifar10",
                     "--set", "model.discriminator=paper-discriminator"]) == 3


def test_divergence_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericalDivergence("non-finite discriminator loss", {"supervised": float("nan")})

    monkeypatch.setattr(trainer, "train", boom)
    assert cli.main(["train", "--out", str(tmp_path), *TINY]) == 4
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "diverged"


def test_corrupt_checkpoint_is_data_error(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"garbage")
    assert cli.main(["eval", "--checkpoint", str(bad)]) == 3


def test_sweep_summary(tmp_path):
    out = tmp_path / "sweep"
    code = cli.main(["sweep", "--param", "consistency.kind", "--values", "none,composite", "--seeds", "2",
                     "--out", str(out), *TINY])
    assert code == 0
    rows = list(csv.reader(open(out / "summary.csv")))
    assert tuple(rows[0]) == cli.SUMMARY_COLUMNS
    assert [r[1] for r in rows[1:]] == ["none", "composite"]
    assert all(r[2] == "2" and r[3] == "0" for r in rows[1:])
    runs = list(csv.DictReader(open(out / "runs.csv")))
    errs = [float(r["student_error"]) for r in runs if r["value"] == "none"]
    mean = sum(errs) / 2
    std = (sum((e - mean) ** 2 for e in errs) / 1) ** 0.5
    assert float(rows[1][4]) == pytest.approx(mean)
    assert float(rows[1][5]) == pytest.approx(std)


def test_sweep_records_failed_runs(tmp_path, monkeypatch):
    real = cli.run_training

    def flaky(cfg, out):
        if cfg["consistency"]["kind"] == "mt":
            raise NumericalDivergence("nan", {})
        return real(cfg, out)

    monkeypatch.setattr(cli, "run_training", flaky)
    out = tmp_path / "s"
    base = cli.apply_overrides({}, [a for a in TINY if a != "--set"])
    cli.run_sweep(base, "consistency.kind", ["none", "mt"], 1, out)
    rows = list(csv.reader(open(out / "summary.csv")))
    assert rows[2][3] == "1" and rows[2][4] == ""
    runs = list(csv.DictReader(open(out / "runs.csv")))
    assert runs[1]["status"].startswith("failed")


def test_convert_svhn_command(tmp_path):
    import numpy as np
    from scipy.io import savemat

    savemat(tmp_path / "t.mat", {"X": np.zeros((32, 32, 3, 2), np.uint8), "y": np.array([[10], [3]])})
    assert cli.main(["convert-svhn", "--mat", str(tmp_path / "t.mat"), "--out", str(tmp_path / "o.bin")]) == 0
    assert (tmp_path / "o.bin").stat().st_size == 2 * 3073


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "ccgan.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("train", "sweep", "eval", "consistency-report", "export-embeddings", "convert-svhn"):
        assert cmd in res.stdout
