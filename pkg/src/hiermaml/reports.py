"""Metric aggregation and report file emission.

Aggregate scores are always recomputed from pooled per-sample predictions,
never averaged from per-task scores. Files are plain CSV plus one JSON
metadata file per run; all numeric CSV fields are deterministic functions of
(config, seed).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .hierarchy import RoutedTaskRecord
from .metalearn import adapt, r_squared
from .net import mse_loss


def record_for_task(model, task, inner_lr, steps) -> RoutedTaskRecord:
    """Evaluate one task under a single model (no routing)."""
    from .errors import DivergenceError, NonFiniteError

    labels = task.query_labels()
    try:
        adapted = adapt(model, task.support, inner_lr, steps)
        preds = model.predict(adapted.params, task.query_features())
        r2 = r_squared(labels, preds)
        mse = mse_loss(preds, labels)
        failed = False
    except (DivergenceError, NonFiniteError):
        preds = np.full(len(labels), np.nan)
        r2, mse, failed = float("-inf"), float("inf"), True
    return RoutedTaskRecord(
        task.task_id, task.location[0], task.location[1], 0, "", float("nan"),
        r2, mse, preds, labels, task.query.years.copy(), failed,
    )


def records_for_tasks(model, tasks, inner_lr, steps, workers=1):
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        return [record_for_task(model, t, inner_lr, steps) for t in tasks]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda t: record_for_task(model, t, inner_lr, steps),
                             tasks))


def _pooled_scores(records):
    """R2 and MSE over the concatenation of all records' samples."""
    ok = [r for r in records if not r.failed]
    if not ok:
        return float("nan"), float("nan"), 0
    labels = np.concatenate([r.labels for r in ok])
    preds = np.concatenate([r.predictions for r in ok])
    return r_squared(labels, preds), mse_loss(preds, labels), labels.size


def tercile_sets_from_records(records):
    """(whole, low, high) task-id sets ranked by mean query label."""
    means = {r.task_id: float(np.mean(r.labels)) for r in records}
    order = sorted(means, key=lambda i: (means[i], i))
    n = len(order)
    third = n // 3
    return set(order), set(order[:n - third]), set(order[third:])


@dataclass
class MetricsReport:
    """Per-task rows plus pooled aggregates and the per-year breakdown."""

    method: str
    records: list
    aggregates: dict = field(default_factory=dict)  # subset -> (r2, mse, n)
    per_year: list = field(default_factory=list)    # (year, r2, n)
    threshold_log: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def build_report(method, records, threshold_log=None, metadata=None) -> MetricsReport:
    report = MetricsReport(method=method, records=list(records),
                           threshold_log=list(threshold_log or []),
                           metadata=dict(metadata or {}))
    if not report.records:
        return report
    whole, low, high = tercile_sets_from_records(report.records)
    for name, ids in (("whole", whole), ("low", low), ("high", high)):
        subset = [r for r in report.records if r.task_id in ids]
        r2, mse, n = _pooled_scores(subset)
        report.aggregates[name] = (r2, mse, n)
    years = {}
    for r in report.records:
        if r.failed:
            continue
        for year in np.unique(r.years):
            mask = r.years == year
            bucket = years.setdefault(int(year), ([], []))
            bucket[0].append(r.labels[mask])
            bucket[1].append(r.predictions[mask])
    for year in sorted(years):
        labels = np.concatenate(years[year][0])
        preds = np.concatenate(years[year][1])
        r2 = r_squared(labels, preds) if labels.size >= 2 else float("nan")
        report.per_year.append((year, r2, labels.size))
    return report


def _fmt(x):
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return format(x, ".17g")
    return str(x)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_report_files(report: MetricsReport, out_dir, split_improvement=None):
    """Emit the full report CSV family into ``out_dir``.

    Returns the list of written paths. ``split_improvement`` rows are
    (task_id, lat, lon, r2_before, r2_after) for hierarchy artifacts.
    """
    import os
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    p = os.path.join(out_dir, "aggregate.csv")
    _write_csv(p, ["method", "subset", "r2", "mse", "n_samples"], [
        (report.method, subset, *report.aggregates[subset])
        for subset in ("whole", "low", "high") if subset in report.aggregates
    ])
    paths.append(p)

    p = os.path.join(out_dir, "per_task.csv")
    _write_csv(p, ["method", "task_id", "lat", "lon", "layer", "leaf",
                   "routing_r2", "r2", "mse", "failed"], [
        (report.method, r.task_id, r.lat, r.lon, r.layer, r.leaf,
         r.routing_r2, r.r2, r.mse, int(r.failed))
        for r in report.records
    ])
    paths.append(p)

    p = os.path.join(out_dir, "per_year.csv")
    _write_csv(p, ["method", "year", "r2", "n_samples"], [
        (report.method, year, r2, n) for year, r2, n in report.per_year
    ])
    paths.append(p)

    p = os.path.join(out_dir, "per_sample.csv")
    rows = []
    for r in report.records:
        if r.failed:
            continue
        for i in range(len(r.labels)):
            rows.append((report.method, r.task_id, int(r.years[i]),
                         r.labels[i], r.predictions[i]))
    _write_csv(p, ["method", "task_id", "year", "label", "prediction"], rows)
    paths.append(p)

    if report.threshold_log:
        p = os.path.join(out_dir, "threshold_log.csv")
        _write_csv(p, ["epoch", "layer", "gamma"], report.threshold_log)
        paths.append(p)

    if split_improvement is not None:
        p = os.path.join(out_dir, "split_improvement.csv")
        _write_csv(p, ["task_id", "lat", "lon", "r2_before", "r2_after"],
                   split_improvement)
        paths.append(p)

    p = os.path.join(out_dir, "run.json")
    with open(p, "w", encoding="utf-8") as fh:
        json.dump(report.metadata, fh, indent=1, sort_keys=True)
    paths.append(p)
    return paths


def write_training_log(rows, path):
    _write_csv(path, ["epoch", "mean_query_mse", "mean_query_r2",
                      "tasks_skipped", "wall_ms"], [
        (r["epoch"], r["mean_query_mse"], r["mean_query_r2"],
         r["tasks_skipped"], r["wall_ms"]) for r in rows
    ])


def recompute_aggregates_from_files(out_dir):
    """Re-derive whole/low/high scores from the per-sample dump.

    Independent check of the aggregate table: groups the per-sample rows by
    task, rebuilds the tercile sets from mean labels, and recomputes pooled
    scores. Returns {subset: (r2, mse, n)}.
    """
    import os
    per_task_samples = {}
    with open(os.path.join(out_dir, "per_sample.csv"), newline="",
              encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            tid = int(row["task_id"])
            bucket = per_task_samples.setdefault(tid, ([], []))
            bucket[0].append(float(row["label"]))
            bucket[1].append(float(row["prediction"]))
    means = {tid: float(np.mean(v[0])) for tid, v in per_task_samples.items()}
    order = sorted(means, key=lambda i: (means[i], i))
    n = len(order)
    third = n // 3
    subsets = {
        "whole": set(order),
        "low": set(order[:n - third]),
        "high": set(order[third:]),
    }
    out = {}
    for name, ids in subsets.items():
        labels = np.concatenate([np.asarray(per_task_samples[t][0]) for t in sorted(ids)])
        preds = np.concatenate([np.asarray(per_task_samples[t][1]) for t in sorted(ids)])
        out[name] = (r_squared(labels, preds), mse_loss(preds, labels), labels.size)
    return out
