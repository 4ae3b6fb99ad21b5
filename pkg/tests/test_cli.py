import json
import os
import sys
import tempfile

import pytest

# Ensure we can import from repo root
ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), os.pardir))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

import robustpl_cli

CONFIGS = os.path.join(ROOT, "configs")


def _run(tmp, *argv):
    settings = os.path.join(tmp, "settings.json")
    if not os.path.exists(settings):
        with open(settings, "w", encoding="utf-8") as f:
            json.dump({"log_to_file": False, "output_directory": os.path.join(tmp, "runs")}, f)
    return robustpl_cli.main(list(argv) + ["--settings", settings, "--log", "ERROR"])


def _write_json(path, data):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f)
    return path


def _read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def test_gradcheck_default_passes(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        assert _run(tmp, "gradcheck", "--points", "20") == 0
    out = capsys.readouterr().out
    assert "families: CE, GCE, BCE, RCE, SCE, MAE" in out


def test_gradcheck_forced_failure(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        assert _run(tmp, "gradcheck", "--families", "gce", "--tolerance", "1e-12", "--points", "5") == 1
    assert "FAIL GCE" in capsys.readouterr().out


def test_gradcheck_family_filter(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        assert _run(tmp, "gradcheck", "--families", "gce", "--q", "0.7", "--points", "10") == 0
    out = capsys.readouterr().out
    assert "GCE(q_exponent=0.7)" in out
    assert "BCE" not in out
    assert "families: GCE" in out


def test_gradcheck_bad_family_is_config_error():
    with tempfile.TemporaryDirectory() as tmp:
        assert _run(tmp, "gradcheck", "--families", "huber") == 2


def test_experiment_missing_field_exit_code(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        cfg = _write_json(os.path.join(tmp, "cfg.json"), {"schema_version": 1, "task": "classification"})
        assert _run(tmp, "experiment", "--config", cfg, "--out", os.path.join(tmp, "out")) == 2
    assert "labeled_fraction" in capsys.readouterr().out


def test_experiment_writes_results_and_is_deterministic():
    raw = {
        "schema_version": 1,
        "task": "classification",
        "labeled_fraction": 0.2,
        "repeats": 1,
        "data": {"mixture": {"num_classes": 2, "components": [
            {"mean": [0.0, 0.0], "covariance": [[1.0, 0.0], [0.0, 1.0]], "count": 40, "label": 0},
            {"mean": [4.0, 0.0], "covariance": [[1.0, 0.0], [0.0, 1.0]], "count": 40, "label": 1},
        ]}, "test_count_per_class": 20},
        "sgd": {"learning_rate": 0.05, "epochs": 3, "batch_size": 16},
        "robust_losses": ["gce"],
    }
    with tempfile.TemporaryDirectory() as tmp:
        cfg = _write_json(os.path.join(tmp, "cfg.json"), raw)
        out_a = os.path.join(tmp, "a")
        out_b = os.path.join(tmp, "b")
        assert _run(tmp, "experiment", "--config", cfg, "--out", out_a, "--p", "0.3,0.5", "--robust", "bce", "--beta", "1.0", "--xlsx") == 0
        assert _run(tmp, "experiment", "--config", cfg, "--out", out_b, "--p", "0.3,0.5", "--robust", "bce", "--beta", "1.0") == 0
        assert _read_bytes(os.path.join(out_a, "result.json")) == _read_bytes(os.path.join(out_b, "result.json"))
        assert _read_bytes(os.path.join(out_a, "result.csv")) == _read_bytes(os.path.join(out_b, "result.csv"))
        assert os.path.isfile(os.path.join(out_a, "result.xlsx"))
        with open(os.path.join(out_a, "result.json"), "r", encoding="utf-8") as f:
            doc = json.load(f)
        assert [block["labeled_fraction"] for block in doc["results"]] == [0.3, 0.5]
        assert doc["config"]["robust_losses"] == [{"family": "bce", "beta": 1.0}]
        assert "student_bce" in doc["results"][0]["arms"]
        with open(os.path.join(out_a, "run_manifest.json"), "r", encoding="utf-8") as f:
            manifest = json.load(f)
        assert manifest["config_digest"] == doc["config_digest"]


def test_simulate_outputs(capsys):
    raw = {
        "schema_version": 1,
        "mixture": "fig2",
        "repeats": 1,
        "test_count_per_class": 30,
        "sgd": {"learning_rate": 0.05, "epochs": 2, "batch_size": 64},
        "lattice": {"resolution": 20},
    }
    with tempfile.TemporaryDirectory() as tmp:
        cfg = _write_json(os.path.join(tmp, "sim.json"), raw)
        out = os.path.join(tmp, "sim")
        assert _run(tmp, "simulate", "--config", cfg, "--out", out) == 0
        with open(os.path.join(out, "grid.csv"), "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        assert lines[0] == "x,y,pred_ce,pred_robust"
        assert len(lines) == 1 + 400
        for name in ("dataset.csv", "dataset.manifest.json", "summary.json", "model_ce.json", "model_robust.json"):
            assert os.path.isfile(os.path.join(out, name))
        first = _read_bytes(os.path.join(out, "summary.json"))
        assert _run(tmp, "simulate", "--config", cfg, "--out", out) == 0
        assert _read_bytes(os.path.join(out, "summary.json")) == first


def test_simulate_bad_config_exit_code():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = _write_json(os.path.join(tmp, "sim.json"), {"schema_version": 1, "robust": {"family": "bce", "beta": 0}})
        assert _run(tmp, "simulate", "--config", cfg) == 2


def test_datagen_round_trip_and_digest():
    with tempfile.TemporaryDirectory() as tmp:
        out = os.path.join(tmp, "data")
        assert _run(tmp, "datagen", "--config", os.path.join(CONFIGS, "fig2_datagen.json"), "--out", out) == 0
        csv_path = os.path.join(out, "fig2.csv")
        with open(csv_path, "r", encoding="utf-8") as f:
            assert len(f.read().splitlines()) == 1 + 960
        with open(os.path.join(out, "fig2.manifest.json"), "r", encoding="utf-8") as f:
            manifest = json.load(f)
        assert manifest["n"] == 960

        from modules.dataset_io import read_dataset_csv, write_dataset_csv

        copy = write_dataset_csv(read_dataset_csv(csv_path), os.path.join(tmp, "copy.csv"))
        assert _read_bytes(copy) == _read_bytes(csv_path)


def test_datagen_without_config_is_config_error():
    with tempfile.TemporaryDirectory() as tmp:
        assert _run(tmp, "datagen") == 2


def test_unknown_command_exits_with_usage_error():
    with pytest.raises(SystemExit) as info:
        robustpl_cli.main(["train"])
    assert info.value.code == 2


def test_experiment_missing_dataset_file_is_config_error(capsys):
    raw = {
        "schema_version": 1,
        "task": "classification",
        "labeled_fraction": 0.2,
        "data": {"train_csv": "nope.csv", "test_csv": "nope_test.csv"},
    }
    with tempfile.TemporaryDirectory() as tmp:
        cfg = _write_json(os.path.join(tmp, "cfg.json"), raw)
        assert _run(tmp, "experiment", "--config", cfg, "--out", os.path.join(tmp, "out")) == 2
    out = capsys.readouterr().out
    assert "data.train_csv" in out
    assert "nope.csv" in out


@pytest.mark.slow
def test_simulate_robust_perceptron_resists_mislabeled_cluster():
    with tempfile.TemporaryDirectory() as tmp:
        out = os.path.join(tmp, "sim")
        assert _run(tmp, "simulate", "--config", os.path.join(CONFIGS, "fig2_simulate.json"), "--out", out, "--repeats", "10") == 0
        with open(os.path.join(out, "summary.json"), "r", encoding="utf-8") as f:
            summary = json.load(f)
    ce = summary["accuracy"]["ce"]
    robust = summary["accuracy"]["robust"]
    assert len(ce["values"]) == 10
    assert summary["robust_loss"]["family"] == "bce"
    assert robust["mean"] - ce["mean"] >= 0.03
