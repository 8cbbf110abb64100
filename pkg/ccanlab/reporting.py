# ccanlab/reporting.py
"""Merge metric files into one report.json plus one CSV per series."""

import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import pandas as pd

from ccanlab.analysis import MetricsReport
from ccanlab.common import DataError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.6f"

# Columns of well-known series, in output order; other series keep first-seen order.
SERIES_COLUMNS = {
    "gate_importance": ["layer", "importance", "std", "count"],
    "precision_delta": ["n", "precision_a", "precision_b", "delta"],
    "layer_le": ["layer", "le"],
}


def _columns(name: str, rows: List[Dict]) -> List[str]:
    columns = list(SERIES_COLUMNS.get(name, []))
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    return ["source"] + columns


def build_report(inputs: Sequence[Tuple[str, MetricsReport]]) -> Tuple[Dict, Dict[str, pd.DataFrame]]:
    """
    Combine labelled reports. Scalars are keyed "<label>.<name>"; series
    with the same name are concatenated with a leading `source` column; every
    report with an `le` scalar contributes a row to the `le_comparison` series.
    """
    if not inputs:
        raise DataError("no metrics to report")
    scalars: Dict[str, object] = OrderedDict()
    series_rows: Dict[str, List[Dict]] = OrderedDict()
    comparison = []
    for label, report in inputs:
        for name in sorted(report.scalars):
            scalars[f"{label}.{name}"] = report.scalars[name]
        for name in sorted(report.series):
            rows = report.series[name]
            series_rows.setdefault(name, []).extend({"source": label, **row} for row in rows)
        if "le" in report.scalars:
            comparison.append({"source": label, "kind": report.kind, "le": report.scalars["le"]})

    if not scalars and not any(series_rows.values()):
        raise DataError("metrics inputs contain no scalars and no series")

    tables = {}
    for name, rows in series_rows.items():
        columns = _columns(name, [{k: v for k, v in row.items() if k != "source"} for row in rows])
        tables[name] = pd.DataFrame(rows, columns=columns)
    if comparison:
        tables["le_comparison"] = pd.DataFrame(comparison, columns=["source", "kind", "le"])

    summary = {
        "inputs": [label for label, _ in inputs],
        "scalars": dict(scalars),
        "series": {name: {"rows": len(table), "columns": list(table.columns)} for name, table in tables.items()},
    }
    return summary, tables


def write_report(paths: Sequence[str], out_dir: str) -> Dict[str, str]:
    """Load metric JSON files (labelled by file stem), write report.json and <series>.csv."""
    if not paths:
        raise DataError("no metrics to report")
    inputs = []
    for path in paths:
        if not Path(path).exists():
            raise DataError(f"metrics input not found: {path}")
        inputs.append((Path(path).stem, MetricsReport.load(path)))
    labels = [label for label, _ in inputs]
    if len(set(labels)) != len(labels):
        raise DataError(f"metrics inputs must have distinct file names, got {', '.join(labels)}")

    summary, tables = build_report(inputs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {"report": str(out / "report.json")}
    with open(written["report"], "w", encoding="utf-8", newline="\n") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    for name, table in tables.items():
        written[name] = str(out / f"{name}.csv")
        table.to_csv(written[name], index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Wrote report with {len(tables)} series to {out}")
    return written
