import logging
import xml.etree.ElementTree as ET

import pandas as pd
import pytest

from mfirl import cli, taxi
from mfirl.cli import error_line, main
from mfirl.exceptions import ConfigurationError


@pytest.fixture
def run(tmp_path):
    common = [
        "--env", "virus", "--horizon", "3", "--demo-count", "40", "--seeds", "2",
        "--iterations", "3", "--batch-size", "8", "--hidden", "8", "--checkpoint-every", "2",
        "--log-every", "1", "--output-dir", str(tmp_path),
    ]

    def invoke(command, *extra):
        return main([command, *common, *extra])

    return invoke


def test_error_line_escapes_quotes():
    line = error_line(ConfigurationError('bad "value"\nhere'))
    assert line == 'error code=ConfigurationError message="bad \\"value\\" here"'


def test_pipeline(run, tmp_path):
    assert run("solve") == 0
    assert (tmp_path / "virus" / "equilibria_mu.csv").exists()
    pi = pd.read_csv(tmp_path / "virus" / "equilibria_pi.csv")
    assert list(pi.columns) == ["context", "t", "state", "action", "pi"]

    assert run("demos") == 0
    demos = pd.read_csv(tmp_path / "virus" / "demos.csv")
    assert demos["traj_id"].nunique() == 40
    assert (demos["context"] == -1).all()
    labels = pd.read_csv(tmp_path / "virus" / "demos_contexts.csv")
    assert set(labels["context"]) <= {0, 1}

    assert run("train") == 0
    for seed in (0, 1):
        seed_dir = tmp_path / "virus" / "pemmfirl" / f"seed{seed}"
        assert (seed_dir / "checkpoint.bin").exists()
        assert (seed_dir / "checkpoint.bin.sig").exists()
        assert "horizon = 3" in (seed_dir / "config.txt").read_text()
        assert pd.read_csv(seed_dir / "log.csv")["iter"].tolist() == [1, 2, 3]

    assert run("eval") == 0
    root = tmp_path / "virus" / "pemmfirl"
    evaluation = pd.read_csv(root / "eval.csv")
    assert evaluation["seed"].tolist() == [0, 1]
    assert evaluation["inference_accuracy"].between(0.5, 1.0).all()
    summary = pd.read_csv(root / "summary.csv")
    assert summary["metric"].tolist() == ["policy_deviation", "expected_return_gap", "inference_accuracy"]
    assert (summary["count"] == 2).all()
    assert "weighted_policy_deviation" in evaluation.columns

    heldout_labels = labels.sort_values("traj_id")["context"].tolist()[32:]
    for name in ("eval_records.csv", "eval_records_ground_truth.csv"):
        records = pd.read_csv(root / name)
        assert list(records.columns) == ["seed", "true_m", "inferred_m", "return_gap", "policy_deviation"]
        assert len(records) == 16
        for seed in (0, 1):
            assert records.loc[records["seed"] == seed, "true_m"].tolist() == heldout_labels
        assert set(records["inferred_m"]) <= {0, 1}
        assert (records["return_gap"] >= 0).all()

    chart = ET.parse(root / "disc_objective.svg").getroot()
    assert len(chart.findall("{http://www.w3.org/2000/svg}polyline")) == 2
    assert (tmp_path / "run.log").exists()


def test_resume_extends_the_log(run, tmp_path):
    assert run("solve") == 0
    assert run("demos") == 0
    assert run("train") == 0
    assert main([
        "train", "--env", "virus", "--horizon", "3", "--demo-count", "40", "--seeds", "2",
        "--iterations", "5", "--batch-size", "8", "--hidden", "8", "--output-dir", str(tmp_path), "--resume",
    ]) == 0
    log = pd.read_csv(tmp_path / "virus" / "pemmfirl" / "seed0" / "log.csv")
    assert log["iter"].tolist() == [1, 2, 3, 4, 5]


def test_training_never_needs_context_labels(run, tmp_path, capsys):
    assert run("solve") == 0
    assert run("demos") == 0
    (tmp_path / "virus" / "demos_contexts.csv").unlink()
    assert run("train", "--algo", "mfairl") == 0
    assert run("eval", "--algo", "mfairl") == 1
    assert "error code=DataError" in capsys.readouterr().err


def test_unknown_environment(tmp_path, capsys):
    assert main(["solve", "--env", "atari", "--output-dir", str(tmp_path)]) == 2
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("error code=UnknownEnvironmentError")
    assert "virus" in err and "taxi" in err


def test_invalid_flag_value(tmp_path, capsys):
    assert main(["solve", "--horizon", "zero", "--output-dir", str(tmp_path)]) == 2
    assert "error code=ConfigurationError" in capsys.readouterr().err


def test_demos_before_solve(tmp_path, capsys):
    assert main(["demos", "--horizon", "3", "--output-dir", str(tmp_path)]) == 1
    assert "run solve first" in capsys.readouterr().err


def test_taxi_ingest_synthetic(tmp_path):
    assert main([
        "taxi-ingest", "--output-dir", str(tmp_path), "--granularity", "0.05",
        "--synthetic-count", "400", "--initial-epochs", "24",
    ]) == 0
    summary = pd.read_csv(tmp_path / "taxi" / "ingest_summary.csv")
    assert summary["rule"].tolist() == ["unreadable", "timestamp", "duration", "bbox", "total"]
    assert summary.set_index("rule").loc["total", "rejected"] == 400
    assert (tmp_path / "taxi" / "grid_model.json").exists()
    assert (tmp_path / "taxi" / "heatmap_demand.csv").exists()


def test_oracle_check(tmp_path):
    assert main(["oracle-check", "--instances", "1", "--resamples", "0", "--output-dir", str(tmp_path)]) == 0
    report = pd.read_csv(tmp_path / "oracle_report.csv")
    assert report["passed"].all()


def test_taxi_run_writes_reference_note(tmp_path, monkeypatch, capsys, caplog):
    assert main([
        "taxi-ingest", "--output-dir", str(tmp_path), "--granularity", "0.05",
        "--synthetic-count", "400", "--initial-epochs", "24",
    ]) == 0
    calls = []

    def fake_experiment(model, pricing):
        calls.append(pricing.seed)
        rows = pd.DataFrame([[5.0, -0.01, 0.02, 0.1]], columns=taxi.REPORT_COLUMNS)
        return taxi.ProfitReport(rows, {}, {}, {"baseline": 1.0, "learned": 1.5})

    monkeypatch.setattr(cli, "run_pricing_experiment", fake_experiment)
    capsys.readouterr()
    with caplog.at_level(logging.INFO, logger="mfirl.cli"):
        assert main([
            "taxi-run", "--output-dir", str(tmp_path), "--taxi-model", str(tmp_path / "taxi" / "grid_model.json"),
            "--synthetic", "--seeds", "2", "--etas", "5",
        ]) == 0
    assert calls == [0, 1]
    assert capsys.readouterr().out == ""
    root = tmp_path / "taxi" / "pemmfirl"
    note = (root / "reference_note.txt").read_text()
    assert note.startswith("reference values not checkable without dataset")
    assert any("reference (eta" in r.getMessage() for r in caplog.records)
    assert "reference (eta" in (tmp_path / "run.log").read_text()
    assert pd.read_csv(root / "expected_profit.csv")["seed"].tolist() == [0, 1]
