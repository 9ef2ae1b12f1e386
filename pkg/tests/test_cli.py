import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from calikit.cli import main
from calikit.gcn import ModelParams
from calikit.graph import load_graph, load_split
from calikit.metrics import ReliabilityBins
from calikit.uncertainty import load_records

GEN = ["gen", "--blocks", "90,10", "--p-in", "0.1", "--p-out", "0.01", "--dim", "8",
       "--shift", "2", "--seed", "1", "--lr-c", "5", "--val-size", "30", "--test-size", "40"]
QUICK = ["--epochs", "25"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(*GEN, "--out", root / "data") == 0
    return root


@pytest.fixture(scope="module")
def trained(data):
    out = data / "base"
    assert run("train", "--data", data / "data", "--method", "baseline", "--seed", 1,
               "--out", out, *QUICK) == 0
    return out


def test_gen_writes_dataset_and_manifest(data):
    names = sorted(p.name for p in (data / "data").iterdir())
    assert names == ["edges.txt", "features.csv", "labels.txt", "manifest.json", "split.csv"]
    manifest = json.loads((data / "data" / "manifest.json").read_text())
    assert manifest["parameters"]["seed"] == 1
    assert manifest["parameters"]["blocks"] == [90, 10]
    d = data / "data"
    g = load_graph(d / "edges.txt", d / "features.csv", d / "labels.txt")
    assert g.num_nodes == 100
    load_split(d / "split.csv").validate(g)


def test_gen_is_byte_identical(data, tmp_path):
    assert run(*GEN, "--out", tmp_path) == 0
    for name in ("edges.txt", "features.csv", "labels.txt", "manifest.json", "split.csv"):
        assert (tmp_path / name).read_bytes() == (data / "data" / name).read_bytes()


def test_gen_rejects_empty_block(tmp_path):
    argv = GEN.copy()
    argv[2] = "0,10"
    assert run(*argv, "--out", tmp_path) == 2


def test_usage_errors_exit_two(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--method", "nonsense"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--blocks", "a,b"])
    assert exc.value.code == 2


def test_train_outputs(trained):
    assert ModelParams.load(trained / "params.bin").d == 8
    rows = list(csv.reader(open(trained / "train_log.csv")))
    assert rows[0][:4] == ["epoch", "loss_total", "loss_ce", "loss_eice"]
    assert all(np.isfinite(float(x)) for x in rows[-1][1:4])
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["config"]["method"] == "baseline"
    assert manifest["config"]["seed"] == 1
    assert manifest["config"]["hidden"] == 16


def test_lambda_zero_matches_baseline_checkpoint(data, trained):
    out = data / "joint0"
    assert run("train", "--data", data / "data", "--method", "calirare", "--lambda", 0,
               "--seed", 1, "--out", out, *QUICK) == 0
    assert (out / "params.bin").read_bytes() == (trained / "params.bin").read_bytes()


def test_lambda_out_of_range(data, tmp_path):
    assert run("train", "--data", data / "data", "--method", "calirare", "--lambda", 1.5,
               "--out", tmp_path) == 2


def test_missing_dataset_is_io_error(tmp_path):
    assert run("train", "--data", tmp_path / "absent", "--out", tmp_path) == 3


def test_config_precedence(data, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 3, "seed": 7, "hidden": 5}))
    assert run("train", "--config", cfg, "--seed", 2, "--data", data / "data",
               "--out", tmp_path / "o") == 0
    resolved = json.loads((tmp_path / "o" / "manifest.json").read_text())["config"]
    assert (resolved["epochs"], resolved["seed"], resolved["hidden"]) == (3, 2, 5)
    assert resolved["lr"] == 0.01
    assert ModelParams.load(tmp_path / "o" / "params.bin").h == 5


def test_other_methods_train(data, tmp_path):
    for method in ("label-smooth", "calirare"):
        out = tmp_path / method
        assert run("train", "--data", data / "data", "--method", method, "--out", out,
                   "--epochs", 12, "--workers", 1) == 0
        assert (out / "params.bin").is_file()


def test_evaluate_report_schema(data, trained, tmp_path):
    assert run("evaluate", "--data", data / "data", "--checkpoint", trained / "params.bin",
               "--out", tmp_path) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    for key in ("ece", "ace_minority", "macro_ace", "eice", "accuracy", "recall", "macro_f1"):
        assert isinstance(report[key], float)
    bins = ReliabilityBins.load_csv(tmp_path / "reliability.csv")
    assert bins.M == 20
    assert sum(bins.count) == 40


def test_evaluate_single_bin(data, trained, tmp_path):
    assert run("evaluate", "--data", data / "data", "--checkpoint", trained / "params.bin",
               "--bins", 1, "--out", tmp_path) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    bins = report["bins"]
    n = sum(bins["count"])
    mean_conf = sum(c * k for c, k in zip(bins["confidence"], bins["count"])) / n
    assert report["ece"] == pytest.approx(abs(report["accuracy"] - mean_conf), abs=1e-12)


def test_evaluate_separable_model(tmp_path):
    assert run("gen", "--blocks", "60,20", "--p-in", "0.2", "--p-out", "0.0", "--dim", "8",
               "--shift", "8", "--lr-c", "10", "--val-size", "20", "--test-size", "30",
               "--out", tmp_path / "d") == 0
    assert run("train", "--data", tmp_path / "d", "--out", tmp_path / "m", "--dropout", 0) == 0
    assert run("evaluate", "--data", tmp_path / "d", "--checkpoint",
               tmp_path / "m" / "params.bin", "--out", tmp_path / "e") == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert report["accuracy"] == 1.0 and report["recall"] == 1.0


def test_evaluate_rejects_mismatched_checkpoint(data, trained, tmp_path):
    assert run("gen", "--blocks", "40,10", "--p-in", "0.1", "--p-out", "0.01", "--dim", "5",
               "--shift", "2", "--lr-c", "3", "--val-size", "10", "--test-size", "10",
               "--out", tmp_path / "d5") == 0
    assert run("evaluate", "--data", tmp_path / "d5", "--checkpoint", trained / "params.bin",
               "--out", tmp_path) == 3
    other = GEN.copy()
    other[other.index("--seed") + 1] = "9"
    assert run(*other, "--out", tmp_path / "d9") == 0
    assert run("evaluate", "--data", tmp_path / "d9", "--checkpoint", trained / "params.bin",
               "--out", tmp_path) == 3


def test_uncertainty_and_calibrate(data, trained, tmp_path):
    argv = ["--data", data / "data", "--checkpoint", trained / "params.bin", "--out", tmp_path]
    assert run("uncertainty", *argv, "--eval-set", "val") == 0
    records = load_records(tmp_path / "uncertainty.csv")
    assert len(records) == 30
    assert all(0 <= r.lower <= r.upper <= 1 for r in records)
    first = (tmp_path / "uncertainty.csv").read_bytes()
    assert run("uncertainty", *argv, "--eval-set", "val") == 0  # served from the LOO cache
    assert (tmp_path / "uncertainty.csv").read_bytes() == first
    assert run("calibrate", *argv) == 0
    T = json.loads((tmp_path / "temperature.json").read_text())["temperature"]
    assert 0.05 <= T <= 20
    assert run("evaluate", *argv, "--temperature", tmp_path / "temperature.json") == 0


def test_sweep_grid_resume_and_validation(data, tmp_path):
    argv = ["sweep", "--data", data / "data", "--alphas", "0.8,0.9", "--lambdas", "0.1,0.2",
            "--epochs", 6, "--out", tmp_path]
    assert run(*argv) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "alpha,lambda,macro_ace,macro_f1"
    assert len(lines) == 5
    # simulate a sweep killed after two cells, with a half-written third line
    (tmp_path / "sweep.csv").write_text("\n".join(lines[:3]) + "\n0.9,0.1,0.")
    assert run(*argv) == 0
    again = (tmp_path / "sweep.csv").read_text().splitlines()
    assert sorted(again) == sorted(lines)
    assert run("sweep", "--data", data / "data", "--alphas", "0.8", "--lambdas", "",
               "--out", tmp_path) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "calikit", *GEN, "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "calikit", "evaluate", "--data",
                           str(tmp_path / "nope"), "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 3
