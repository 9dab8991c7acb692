"""Command-line interface: exit codes, report payloads, determinism."""

import csv
import json

import pytest

from mfbslq import NumericsError
from mfbslq.cli import main
from conftest import corpus_path, scalar_spec_doc

S1 = str(corpus_path("s1"))
M1 = str(corpus_path("m1"))


def _write_spec(tmp_path, doc, name="prob.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def _strip_timings(path):
    report = json.loads(path.read_text())
    report.pop("timings")
    return json.dumps(report, sort_keys=True)


# ---------------------------------------------------------------------------
# run


def test_run_writes_report(tmp_path):
    out = tmp_path / "report.json"
    code = main(["run", "--spec", S1, "--nt", "4", "--with-oracle",
                 "--check", "--out", str(out)])
    assert code == 0
    report = json.loads(out.read_text())
    assert {"cost", "eta_star", "lambda_residual", "constraint_residuals",
            "stationarity_residual", "riccati", "timings",
            "oracle"} == set(report)
    assert report["oracle"]["control_error"] <= 0.10


def test_run_zero_terminal(tmp_path):
    spec = _write_spec(tmp_path, scalar_spec_doc())
    out = tmp_path / "report.json"
    assert main(["run", "--spec", spec, "--nt", "4", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["cost"] == 0.0


def test_run_check_gate_trips_on_coarse_tree(tmp_path):
    # the coarse-grid control error genuinely exceeds the quality gate
    out = tmp_path / "report.json"
    code = main(["run", "--spec", M1, "--nt", "4", "--with-oracle",
                 "--check", "--out", str(out)])
    assert code == 3
    assert out.exists()  # report still written before the gate fires


def test_run_check_gate_override(tmp_path):
    out = tmp_path / "report.json"
    code = main(["run", "--spec", M1, "--nt", "4", "--with-oracle", "--check",
                 "--max-control-error", "0.5", "--out", str(out)])
    assert code == 0


def test_run_missing_file_is_usage_error(tmp_path):
    assert main(["run", "--spec", str(tmp_path / "nope.json"), "--nt", "4"]) == 1


def test_run_invalid_assumptions_is_usage_error(tmp_path):
    spec = _write_spec(tmp_path, scalar_spec_doc(R=0.1))
    assert main(["run", "--spec", spec, "--nt", "4"]) == 1


def test_run_solver_failure_maps_to_two(tmp_path, monkeypatch):
    import mfbslq.cli as cli

    def boom(*args, **kwargs):
        raise NumericsError("synthetic failure")

    monkeypatch.setattr(cli, "run_pipeline", boom)
    assert main(["run", "--spec", S1, "--nt", "4"]) == 2


def test_run_deterministic_checked_payload(tmp_path):
    out1, out2 = tmp_path / "a.json", tmp_path / "b.json"
    for out in (out1, out2):
        assert main(["run", "--spec", M1, "--nt", "5", "--with-oracle",
                     "--out", str(out)]) == 0
    assert _strip_timings(out1) == _strip_timings(out2)


# ---------------------------------------------------------------------------
# converge


def test_converge_table(tmp_path):
    out = tmp_path / "table.csv"
    assert main(["converge", "--spec", S1, "--nt", "2,4,8",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.read_text().splitlines()))
    assert [r["nt"] for r in rows] == ["2", "4", "8"]
    errs = [float(r["control_err_vs_oracle"]) for r in rows]
    assert errs[2] < errs[1] < errs[0]
    gaps = [float(r["cost_gap"]) for r in rows]
    assert gaps[2] < gaps[1] < gaps[0]
    # log2 ratios of a first-order quantity hover around one
    assert 0.7 <= float(rows[2]["control_rate"]) <= 1.4
    assert rows[0]["control_rate"] == ""


def test_converge_zero_terminal_all_zero(tmp_path):
    spec = _write_spec(tmp_path, scalar_spec_doc())
    out = tmp_path / "table.csv"
    assert main(["converge", "--spec", spec, "--nt", "2,4",
                 "--out", str(out)]) == 0
    for row in csv.DictReader(out.read_text().splitlines()):
        assert float(row["control_err_vs_oracle"]) == 0.0
        assert abs(float(row["cost_gap"])) <= 1e-15


def test_converge_requires_ascending_depths(tmp_path):
    assert main(["converge", "--spec", S1, "--nt", "8,4",
                 "--out", str(tmp_path / "t.csv")]) == 1


def test_converge_partial_table_on_failure(tmp_path, monkeypatch):
    import mfbslq.cli as cli
    real = cli.run_pipeline

    def flaky(spec, nt, **kwargs):
        if nt >= 4:
            raise NumericsError("synthetic failure")
        return real(spec, nt, **kwargs)

    monkeypatch.setattr(cli, "run_pipeline", flaky)
    out = tmp_path / "table.csv"
    assert main(["converge", "--spec", S1, "--nt", "2,4,8",
                 "--out", str(out)]) == 2
    lines = out.read_text().splitlines()
    assert len(lines) == 3  # header, one good row, one marked failure
    assert lines[1].startswith("2,")
    assert lines[2].startswith("4,") and "error" in lines[2]


# ---------------------------------------------------------------------------
# validate


def test_validate_corpus_passes(capsys):
    assert main(["validate", "--spec", M1]) == 0
    assert "pass" in capsys.readouterr().out


def test_validate_names_offending_weight(tmp_path, capsys):
    spec = _write_spec(tmp_path, scalar_spec_doc(R=0.1))
    assert main(["validate", "--spec", spec]) == 1
    out = capsys.readouterr().out
    assert "FAIL: R >= delta*I" in out


def test_validate_reports_negative_eigenvalue(tmp_path, capsys):
    doc = scalar_spec_doc()
    doc["n"] = 2
    zero2 = {"form": "constant", "value": [[0.0, 0.0], [0.0, 0.0]]}
    for key in ("A", "A_bar", "C", "C_bar"):
        doc["dynamics"][key] = dict(zero2)
    doc["dynamics"]["B"] = {"form": "constant", "value": [[1.0], [0.0]]}
    doc["dynamics"]["B_bar"] = {"form": "constant", "value": [[0.0], [0.0]]}
    doc["cost"]["Q"] = {"form": "constant", "value": [[1.0, 2.0], [2.0, 1.0]]}
    for key in ("Q_bar", "R_bar"):
        doc["cost"][key] = dict(zero2)
    doc["cost"]["R"] = {"form": "constant", "value": [[1.0, 0.0], [0.0, 1.0]]}
    doc["cost"]["G"] = [[0.0, 0.0], [0.0, 0.0]]
    doc["terminal"] = {"form": "affine_in_WT", "g0": [0.0, 0.0],
                       "g1": [0.0, 0.0]}
    spec = _write_spec(tmp_path, doc)
    assert main(["validate", "--spec", spec]) == 1
    out = capsys.readouterr().out
    assert "Q" in out and "-1" in out


def test_validate_parse_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{")
    assert main(["validate", "--spec", str(path)]) == 1
