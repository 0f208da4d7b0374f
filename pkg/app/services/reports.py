"""Comparison tables over evaluation reports."""

import csv
import json
import logging
import math
import os
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from app.core.errors import DataError, UsageError
from app.services.evaluator import EvalReport

logger = logging.getLogger(__name__)

METRICS = ["rmse", "rmse_state", "nll", "nll_with_2pi", "obs_rmse", "corr_R_visibility", "D_Q"]


class ComparisonRow(BaseModel):
    label: str
    count: int
    mean: Dict[str, Optional[float]] = Field(default_factory=dict)
    stderr: Dict[str, Optional[float]] = Field(default_factory=dict)


def load_report(path: str) -> EvalReport:
    if not os.path.exists(path):
        raise UsageError(f"report not found: {path}")
    try:
        with open(path) as f:
            return EvalReport.model_validate(json.load(f))
    except ValueError as e:
        raise DataError(f"{path} is not an evaluation report: {e}") from e


def _metric_values(report: EvalReport) -> Dict[str, float]:
    values = {}
    for name in METRICS:
        value = getattr(report, name)
        if value is not None and math.isfinite(value):
            values[name] = float(value)
    return values


def compare(reports: Sequence[EvalReport]) -> List[ComparisonRow]:
    """One row per label with the mean and standard error of every metric.

    The metric columns are the union over all reports; a label without a value for a
    metric gets None there. stderr is sd / sqrt(n) and needs at least two reports.
    """
    if not reports:
        raise UsageError("compare needs at least one report")
    groups: "OrderedDict[str, List[Dict[str, float]]]" = OrderedDict()
    for report in reports:
        groups.setdefault(report.label, []).append(_metric_values(report))
    columns = [m for m in METRICS if any(m in v for group in groups.values() for v in group)]
    rows = []
    for label, group in groups.items():
        row = ComparisonRow(label=label, count=len(group))
        for metric in columns:
            values = np.array([v[metric] for v in group if metric in v])
            if values.size == 0:
                row.mean[metric], row.stderr[metric] = None, None
                continue
            row.mean[metric] = float(values.mean())
            row.stderr[metric] = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else None
        rows.append(row)
    return rows


def _cell(value: Optional[float]) -> str:
    return "" if value is None else repr(value)


def write_comparison(rows: Sequence[ComparisonRow], out_dir: str) -> Dict[str, str]:
    columns = list(rows[0].mean) if rows else []
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "compare.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "count"] + [c for m in columns for c in (m, f"{m}_stderr")])
        for row in rows:
            writer.writerow([row.label, row.count]
                            + [c for m in columns for c in (_cell(row.mean[m]), _cell(row.stderr[m]))])
    json_path = os.path.join(out_dir, "compare.json")
    with open(json_path, "w") as f:
        json.dump([row.model_dump() for row in rows], f, indent=2)
    return {"csv": csv_path, "json": json_path}


def format_table(rows: Sequence[ComparisonRow]) -> str:
    columns = list(rows[0].mean) if rows else []
    width = max([len(r.label) for r in rows] + [5])
    lines = ["label".ljust(width) + "  n  " + "  ".join(c.rjust(17) for c in columns)]
    for row in rows:
        cells = []
        for m in columns:
            mean, err = row.mean[m], row.stderr[m]
            text = "-" if mean is None else f"{mean:.4g}" + ("" if err is None else f"±{err:.2g}")
            cells.append(text.rjust(17))
        lines.append(row.label.ljust(width) + f"  {row.count:<2} " + "  ".join(cells))
    return "\n".join(lines)
