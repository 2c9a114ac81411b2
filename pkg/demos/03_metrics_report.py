"""Scenario manifest, per-scenario records, and the summary report row.

Uses the bundled scenario list and the metrics fixture from the test suite.
Run with ``python demos/03_metrics_report.py`` from the repository root.
"""

from __future__ import annotations

from collections import Counter
from pathlib import Path

import numpy as np

from ragen.evalharness import (
    REPORT_HEADER,
    MetricsReport,
    average_reports,
    compute_metrics,
    load_manifest,
    read_records,
    render_report,
    select_split,
)

# %% the scenario set, by weakness class and split
entries = load_manifest()
print(len(entries), "scenarios;", dict(Counter(e.split.value for e in entries)))
for cwe, n in sorted(Counter(e.cwe for e in entries).items()):
    print(f"  CWE-{cwe}: {n}")
for e in select_split(entries, "val"):
    print(f"  val {e.cwe}/{e.scenario}: {e.prompt}")

# %% metrics over twenty stored results
records = read_records(Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "metrics_20.jsonl")
report = compute_metrics(records)
print(REPORT_HEADER)
print(render_report(report, "fixture", with_extras=True))

# %% repeats are averaged, so counts can come out fractional
rng = np.random.default_rng(5)
reports = []
for _ in range(3):
    keep = rng.random(len(records)) < 0.9
    reports.append(compute_metrics([r for r, k in zip(records, keep) if k] or records[:1]))
print(render_report(average_reports(reports), "3 repeats"))

# %% the reference row format
print(render_report(MetricsReport(30, 94.8, 95.8, 24.0, 0.0, 23.7, 1.0), "reference"))
