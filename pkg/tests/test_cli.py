import csv
import io
import json

import pytest

from adaptive_lqr.cli import main


def test_riccati_default_preset(capsys):
    assert main(["riccati"]) == 0
    out = capsys.readouterr().out
    assert "stable" in out and "UNSTABLE" not in out


def test_riccati_json_inline(capsys):
    m = json.dumps({"A": [[0.5]], "B": [[1.0]], "Q": [[1.0]], "R": [[1.0]]})
    assert main(["riccati", "--matrices", m, "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["K"][0][0] == pytest.approx(1.13278, abs=1e-5)


def test_riccati_not_stabilizable_is_runtime_error(capsys):
    m = json.dumps({"A": [[2.0]], "B": [[0.0]], "Q": [[1.0]], "R": [[1.0]]})
    assert main(["riccati", "--matrices", m]) == 2


def test_validate_preset(capsys):
    assert main(["validate"]) == 0
    assert "config OK" in capsys.readouterr().out


def test_validate_infeasible(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("policy:\n  perturbation:\n    c_low: 5\n")
    assert main(["validate", "--config", str(cfg)]) == 1


def test_unknown_flag_and_command(capsys):
    assert main(["experiment", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert main([]) == 1


def test_experiment_csv(tmp_path):
    out = tmp_path / "r.csv"
    assert main(["experiment", "--horizon", "300", "--replicates", "2", "--seed", "4", "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert {r["seed"] for r in rows} == {"4", "5"}


def test_experiment_deterministic_with_threads(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["experiment", "--horizon", "300", "--replicates", "3"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--threads", "3", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_experiment_missing_config():
    assert main(["experiment", "--config", "/nonexistent.yaml"]) == 1


def test_simulate_trace(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["simulate", "--horizon", "20", "--policy", "rce", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 21
    assert lines[0].startswith("t,x0,x1,x2,u0")


def test_simulate_json(tmp_path):
    out = tmp_path / "s.json"
    assert main(["simulate", "--horizon", "10", "--format", "json", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["x"]) == 11


def test_compare(tmp_path, capsys):
    out = tmp_path / "c.json"
    assert main(["compare", "--policies", "perturbed_greedy,rce,ts", "--horizon", "200", "--replicates", "2",
                 "--format", "json", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert set(doc["summary"]) == {"perturbed_greedy", "rce", "ts"}
    assert main(["compare", "--policies", "rce", "--horizon", "50"]) == 1


def test_oracle_seed7(capsys):
    assert main(["oracle", "--seed", "7", "--systems", "4", "--horizon", "100"]) == 0
    assert "worst telescoping" in capsys.readouterr().out
