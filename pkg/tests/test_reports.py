import csv
import json
import math

import pytest

from app.core.errors import DataError, UsageError
from app.services.evaluator import DiagnosticsSummary, EvalReport
from app.services.reports import compare, format_table, load_report, write_comparison


def _report(label: str, rmse: float, nll: float = 1.0, **extra) -> EvalReport:
    return EvalReport(label=label, filter="ekf", sequences=1, runs=3, rmse=rmse, rmse_state=rmse * 2, nll=nll,
                      nll_with_2pi=nll + 1.0, diagnostics=DiagnosticsSummary(mean_innovation_norm=1.0), **extra)


def test_single_report_row():
    rows = compare([_report("ekf", 2.0)])
    assert len(rows) == 1
    assert rows[0].count == 1
    assert rows[0].mean["rmse"] == 2.0
    assert rows[0].stderr["rmse"] is None


def test_two_seeds_give_standard_error():
    rows = compare([_report("ukf", 1.0), _report("ukf", 3.0)])
    assert rows[0].count == 2
    assert rows[0].mean["rmse"] == pytest.approx(2.0)
    # sd = sqrt(2), stderr = sd / sqrt(2)
    assert rows[0].stderr["rmse"] == pytest.approx(1.0)


def test_metric_columns_are_a_union():
    rows = compare([_report("a", 1.0), _report("b", 1.0, D_Q=0.5)])
    assert "D_Q" in rows[0].mean
    assert rows[0].mean["D_Q"] is None
    assert rows[1].mean["D_Q"] == 0.5
    assert "corr_R_visibility" not in rows[0].mean


def test_labels_keep_first_seen_order():
    rows = compare([_report("pf-m", 1.0), _report("ekf", 1.0), _report("pf-m", 2.0)])
    assert [r.label for r in rows] == ["pf-m", "ekf"]


def test_compare_needs_reports():
    with pytest.raises(UsageError):
        compare([])


def test_write_comparison(tmp_path):
    rows = compare([_report("ekf", 1.0), _report("ekf", 3.0), _report("ukf", 2.0)])
    paths = write_comparison(rows, str(tmp_path))
    with open(paths["csv"]) as f:
        table = list(csv.reader(f))
    assert table[0][:4] == ["label", "count", "rmse", "rmse_stderr"]
    assert table[1][:3] == ["ekf", "2", "2.0"]
    assert table[2][3] == ""
    with open(paths["json"]) as f:
        data = json.load(f)
    assert data[1]["label"] == "ukf"
    assert "ekf" in format_table(rows)


def test_load_report(tmp_path):
    path = tmp_path / "report.json"
    path.write_text(_report("ekf", 1.5).model_dump_json())
    assert load_report(str(path)).rmse == 1.5
    bad = tmp_path / "bad.json"
    bad.write_text("{\"label\": 3}")
    with pytest.raises(DataError):
        load_report(str(bad))
    with pytest.raises(UsageError):
        load_report(str(tmp_path / "missing.json"))


def test_non_finite_metrics_are_left_out():
    rows = compare([_report("ekf", 1.0, nll=math.inf)])
    assert "nll" not in rows[0].mean
