import csv
import hashlib
import json
import subprocess
import sys
import zipfile

import numpy as np
import pytest

from dgstmtl import checkpoint
from dgstmtl.cli import main
from dgstmtl.data import Manifest, TaskDataset, write_csv
from dgstmtl.graph import write_edge_list
from dgstmtl.training import evaluate, prepare

SMALL = ["--hidden", "8", "--head-hidden", "8", "--ctke-dim", "6"]


def _digest(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir())}


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--nodes", "4", "--length", "200", "--coupling", "0.8", "--seed", "7", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--manifest", str(data_dir / "manifest.txt"), "--out", str(out), "--epochs", "4", *SMALL])
    assert rc == 0
    return out


def test_synth_writes_files_deterministically(tmp_path, data_dir):
    args = ["synth", "--nodes", "4", "--length", "200", "--coupling", "0.8", "--seed", "7", "--out"]
    assert main(args + [str(tmp_path / "again")]) == 0
    assert sorted(_digest(data_dir)) == ["edges.csv", "flow.csv", "manifest.txt", "speed.csv"]
    assert _digest(tmp_path / "again") == _digest(data_dir)


@pytest.mark.parametrize("argv", [
    ["synth", "--nodes", "1", "--out", "x"],
    ["synth", "--coupling", "2", "--out", "x"],
    ["gradcheck", "--sample", "0"],
    ["gradcheck", "--eps", "-1"],
    ["nonsense"],
    ["train", "--manifest", "m.txt"],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    try:
        rc = main(argv)
    except SystemExit as exc:
        rc = exc.code
    assert rc == 1
    assert not (tmp_path / "x").exists()


@pytest.mark.parametrize("flags", [["--batch-size", "0"], ["--ctke-dim", "7"], ["--beta", "1,1,1"],
                                   ["--threshold", "2"], ["--alpha", "0,1"]])
def test_invalid_train_config_is_usage_error_before_compute(data_dir, tmp_path, flags):
    out = tmp_path / "run"
    assert main(["train", "--manifest", str(data_dir / "manifest.txt"), "--out", str(out), *flags]) == 1
    assert not (out / "trace.csv").exists() and not (out / "checkpoint.zip").exists()


def test_train_outputs(run_dir):
    assert {"checkpoint.zip", "config.json", "trace.csv", "run.log"} <= set(p.name for p in run_dir.iterdir())
    rows = _rows(run_dir / "trace.csv")
    assert 1 <= len(rows) <= 4 and list(rows[0]) == ["epoch", "train_loss", "val_loss"]
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["train"]["max_epochs"] == 4 and cfg["model"]["adjacency"] == "full" and cfg["hidden"] == 8
    assert cfg["train"]["learning_rate"] == 0.003 and cfg["train"]["batch_size"] == 24


def test_best_so_far_validation_is_non_increasing(run_dir):
    vals = [float(r["val_loss"]) for r in _rows(run_dir / "trace.csv")]
    best = np.minimum.accumulate(vals)
    assert np.all(np.diff(best) <= 0)
    ckpt = checkpoint.load(run_dir / "checkpoint.zip")
    assert vals[ckpt.extra["best_epoch"] - 1] == best[-1]


def test_train_is_byte_identical_except_log(data_dir, run_dir, tmp_path):
    out = tmp_path / "again"
    assert main(["train", "--manifest", str(data_dir / "manifest.txt"), "--out", str(out), "--epochs", "4", *SMALL]) == 0
    a, b = _digest(run_dir), _digest(out)
    a.pop("run.log"), b.pop("run.log")
    assert a == b


def test_train_does_not_touch_inputs(data_dir, tmp_path):
    before = _digest(data_dir)
    main(["train", "--manifest", str(data_dir / "manifest.txt"), "--out", str(tmp_path / "r"), "--epochs", "1", *SMALL])
    assert _digest(data_dir) == before


def test_static_only_checkpoint_has_no_ctke(data_dir, tmp_path):
    out = tmp_path / "s"
    assert main(["train", "--manifest", str(data_dir / "manifest.txt"), "--out", str(out), "--epochs", "1",
                 "--ablation", "static_only", *SMALL]) == 0
    names = zipfile.ZipFile(out / "checkpoint.zip").namelist()
    assert not any("ctke" in n or "gates" in n for n in names)
    assert json.loads((out / "config.json").read_text())["model"]["adjacency"] == "static_only"


def test_variant_and_layout_flags(data_dir, tmp_path):
    out = tmp_path / "v"
    assert main(["train", "--manifest", str(data_dir / "manifest.txt"), "--out", str(out), "--epochs", "1",
                 "--variant", "9", "--layout", "P3", "--export-graph", "--export-hybrid", *SMALL]) == 0
    cfg = json.loads((out / "config.json").read_text())["model"]
    assert cfg["dense_residual"] is False and cfg["prior_layout"] == "P3"
    a_p = np.loadtxt(out / "a_p.csv", delimiter=",")
    np.testing.assert_array_equal(a_p[:4, 4:8], np.eye(4))
    np.testing.assert_array_equal(a_p[4:8, 8:], np.eye(4))
    hybrid = np.loadtxt(out / "hybrid_flow.csv", delimiter=",")
    assert hybrid.shape == (12, 12)


def test_eval_matches_library(data_dir, run_dir, tmp_path):
    out = tmp_path / "m.csv"
    assert main(["eval", "--checkpoint", str(run_dir / "checkpoint.zip"), "--manifest",
                 str(data_dir / "manifest.txt"), "--out", str(out)]) == 0
    rows = _rows(out)
    assert [r["task"] for r in rows] == ["flow", "speed"] and list(rows[0]) == ["task", "mse", "rmse", "mae", "mape"]
    ckpt = checkpoint.load(run_dir / "checkpoint.zip")
    tasks, edges = Manifest.read(data_dir / "manifest.txt").load()
    exp = prepare(tasks, edges)
    for row, m in zip(rows, evaluate(ckpt.model, exp.splits["test"], ckpt.task_names)):
        assert float(row["rmse"]) == m.rmse and float(row["mae"]) == m.mae and float(row["mape"]) == m.mape
        assert float(row["mse"]) == m.mse


def test_predict_csv(data_dir, run_dir, tmp_path):
    out = tmp_path / "p.csv"
    assert main(["predict", "--checkpoint", str(run_dir / "checkpoint.zip"), "--manifest",
                 str(data_dir / "manifest.txt"), "--split", "val", "--out", str(out)]) == 0
    rows = _rows(out)
    assert len(rows) == 38 * 4 * 2
    tasks, _ = Manifest.read(data_dir / "manifest.txt").load()
    first = rows[0]
    assert first["task"] == "flow" and first["node"] == "0"
    assert float(first["target"]) == pytest.approx(tasks[0].series[0, int(first["sample"]) + 12], rel=1e-12)


def test_eval_dimension_mismatch_is_data_error(run_dir, tmp_path):
    assert main(["synth", "--nodes", "5", "--length", "100", "--out", str(tmp_path / "d5")]) == 0
    rc = main(["eval", "--checkpoint", str(run_dir / "checkpoint.zip"), "--manifest",
               str(tmp_path / "d5" / "manifest.txt"), "--out", str(tmp_path / "m.csv")])
    assert rc == 2


def test_missing_inputs_are_data_errors(data_dir, tmp_path):
    assert main(["train", "--manifest", str(tmp_path / "none.txt"), "--out", str(tmp_path / "r")]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none.zip"), "--manifest", str(data_dir / "manifest.txt"),
                 "--out", str(tmp_path / "m.csv")]) == 2


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck"]) == 0
    assert "PASS" in capsys.readouterr().out
    # a coarse step is allowed to fail the tolerance; it must not crash
    assert main(["gradcheck", "--eps", "1e-2"]) in (0, 3)


def test_overfit_run_has_near_zero_train_metrics(tmp_path):
    t = np.arange(60)
    ph = np.arange(3)[:, None]
    write_csv(tmp_path / "a.csv", TaskDataset("a", 50 + 20 * np.sin(2 * np.pi * (t + ph) / 6)))
    write_csv(tmp_path / "b.csv", TaskDataset("b", 10 + 3 * np.cos(2 * np.pi * (t + ph) / 6)))
    write_edge_list(tmp_path / "e.csv", [(0, 1), (1, 2)])
    Manifest([tmp_path / "a.csv", tmp_path / "b.csv"], ["a", "b"], tmp_path / "e.csv").write(tmp_path / "m.txt")
    assert main(["train", "--manifest", str(tmp_path / "m.txt"), "--out", str(tmp_path / "r"), "--epochs", "150",
                 "--patience", "150", "--lr", "0.01", "--batch-size", "8", "--hidden", "16", "--head-hidden", "16",
                 "--ctke-dim", "6"]) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint.zip"), "--manifest", str(tmp_path / "m.txt"),
                 "--split", "train", "--out", str(tmp_path / "m.csv")]) == 0
    rows = {r["task"]: r for r in _rows(tmp_path / "m.csv")}
    assert float(rows["a"]["rmse"]) < 0.01 * 20
    assert float(rows["b"]["rmse"]) < 0.01 * 3


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dgstmtl.cli", "synth", "--nodes", "1", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "usage error" in proc.stderr
