"""Zero-shot evaluation: batch RMSE statistics, long-horizon iterative
inference by chunking, and ingestion of two-column benchmark recordings.

Evaluation entry points take a predictor callable mapping a list of tasks
to a list of predictive outputs, so trained models and test stubs share one
interface; `make_predictor` wraps checkpoint parameters into that shape.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import metamodel
from .errors import CsvFormatError
from .metamodel import ModelConfig, ModelParams, PredictiveOutput
from .risk import rmse_risk, tail_order
from .sysgen import TaskDataset

Predictor = Callable[[Sequence[TaskDataset]], list[PredictiveOutput]]

_CEIL_EPS = 1e-9


def make_predictor(params: ModelParams, config: ModelConfig) -> Predictor:
    return lambda tasks: metamodel.forward_batch(params, config, tasks)


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        if len(self.counts) != len(self.bin_edges) - 1:
            raise ValueError("counts length must be len(edges) - 1")
        if not (np.diff(self.bin_edges) > 0).all():
            raise ValueError("bin edges must be strictly increasing")


@dataclass(frozen=True)
class EvalReport:
    n_tasks: int
    mean_rmse: float
    median_rmse: float
    tail_mean_rmse: float
    tail_fraction_used: float
    per_task: list[tuple[int, float]]
    histogram: Histogram

    def __post_init__(self):
        if len(self.per_task) != self.n_tasks:
            raise ValueError("per_task length must equal n_tasks")
        if self.tail_mean_rmse < self.mean_rmse - 1e-12 * max(1.0, abs(self.mean_rmse)):
            raise ValueError("tail mean below batch mean")

    def to_dict(self) -> dict:
        return {
            "n_tasks": self.n_tasks,
            "mean_rmse": self.mean_rmse,
            "median_rmse": self.median_rmse,
            "tail_mean_rmse": self.tail_mean_rmse,
            "tail_fraction_used": self.tail_fraction_used,
            "histogram": {
                "bin_edges": [float(e) for e in self.histogram.bin_edges],
                "counts": [int(c) for c in self.histogram.counts],
            },
        }


@dataclass(frozen=True)
class BenchmarkSeries:
    u: np.ndarray
    y: np.ndarray
    name: str = ""

    def __post_init__(self):
        if len(self.u) != len(self.y):
            raise ValueError("u and y lengths differ")
        if not (np.isfinite(self.u).all() and np.isfinite(self.y).all()):
            raise ValueError("benchmark series must be finite")

    @property
    def sample_count(self) -> int:
        return len(self.u)


def evaluate_batch(
    model: Predictor,
    tasks: Sequence[TaskDataset],
    tail_fraction: float = 0.4,
    n_bins: int = 100,
) -> EvalReport:
    """Per-task RMSE over the prediction horizon with mean / lower-median /
    worst-ceil(q*N)-mean statistics and a uniform histogram on [0, max]."""
    if len(tasks) == 0:
        raise ValueError("tasks must be nonempty")
    if not 0.0 < tail_fraction <= 1.0:
        raise ValueError(f"tail_fraction must be in (0, 1], got {tail_fraction}")
    outputs = model(list(tasks))
    rmses = np.array([rmse_risk(t.target, o) for t, o in zip(tasks, outputs)])
    n = len(rmses)
    k = int(math.ceil(tail_fraction * n - _CEIL_EPS))
    order = tail_order(rmses)
    tail_mean = float(rmses[order[:k]].mean())
    median = float(np.sort(rmses)[(n - 1) // 2])
    hi = float(rmses.max()) if rmses.max() > 0 else 1.0
    edges = np.linspace(0.0, hi, n_bins + 1)
    counts, _ = np.histogram(rmses, bins=edges)
    return EvalReport(
        n_tasks=n,
        mean_rmse=float(rmses.mean()),
        median_rmse=median,
        tail_mean_rmse=tail_mean,
        tail_fraction_used=tail_fraction,
        per_task=[(i, float(r)) for i, r in enumerate(rmses)],
        histogram=Histogram(bin_edges=edges, counts=counts),
    )


def iterative_inference(
    model: Predictor,
    context_u: np.ndarray,
    context_y: np.ndarray,
    long_u: np.ndarray,
    long_y_init: np.ndarray,
    chunk: int = 100,
) -> np.ndarray:
    """Predict an arbitrarily long record by chaining fixed-horizon queries.

    The first query uses the provided initial conditions; every following
    query re-seeds its initial conditions with the last c simulated samples.
    Consecutive non-overlapping chunks are processed, the trailing remainder
    as a final short chunk. Returns predictions for samples c+1..end.
    """
    long_u = np.asarray(long_u, dtype=float)
    long_y_init = np.asarray(long_y_init, dtype=float)
    c = len(long_y_init)
    if c < 1:
        raise ValueError("long_y_init must provide at least one initial sample")
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    if len(long_u) < c + chunk:
        raise ValueError(
            f"long_u must hold at least c + chunk = {c + chunk} samples, got {len(long_u)}"
        )
    sim = np.empty(len(long_u))
    sim[:c] = long_y_init
    pos = c
    while pos < len(long_u):
        qlen = min(chunk, len(long_u) - pos)
        query_u = long_u[pos - c:pos + qlen]
        query_y = np.concatenate([sim[pos - c:pos], np.zeros(qlen)])
        task = TaskDataset(
            context_u=context_u,
            context_y=context_y,
            query_u=query_u,
            query_y=query_y,
            init_len=c,
        )
        out = model([task])[0]
        sim[pos:pos + qlen] = out.mu
        pos += qlen
    return sim[c:]


@dataclass(frozen=True)
class BenchmarkSeriesReport:
    name: str
    rmse: float
    per_context_rmse: list[float]
    per_step_rmse: np.ndarray
    n_contexts: int

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "rmse": self.rmse,
            "per_context_rmse": self.per_context_rmse,
            "n_contexts": self.n_contexts,
            "n_steps": int(len(self.per_step_rmse)),
        }


@dataclass(frozen=True)
class BenchmarkReport:
    series: list[BenchmarkSeriesReport]
    m: int
    c: int
    chunk: int

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "c": self.c,
            "chunk": self.chunk,
            "series": [s.to_dict() for s in self.series],
        }


def run_benchmark(
    model: Predictor,
    train_series: BenchmarkSeries,
    test_series: Sequence[BenchmarkSeries],
    m: int,
    c: int,
    chunk: int = 100,
) -> BenchmarkReport:
    """Each non-overlapping length-m subsequence of the training record serves
    as a context; every test record is simulated by iterative inference from
    each context. Per-series RMSE pools squared errors within one (context,
    series) pass, then averages over contexts; the per-step series averages
    squared errors across contexts at each time step."""
    n_ctx = len(train_series.u) // m
    if n_ctx < 1:
        raise ValueError(f"training record shorter than one context (m={m})")
    contexts = [
        (train_series.u[i * m:(i + 1) * m], train_series.y[i * m:(i + 1) * m])
        for i in range(n_ctx)
    ]
    reports = []
    for series in test_series:
        errors = []
        for ctx_u, ctx_y in contexts:
            pred = iterative_inference(model, ctx_u, ctx_y, series.u, series.y[:c], chunk)
            errors.append(pred - series.y[c:])
        err = np.stack(errors)
        per_context = [float(np.sqrt(np.mean(e * e))) for e in errors]
        reports.append(
            BenchmarkSeriesReport(
                name=series.name,
                rmse=float(np.mean(per_context)),
                per_context_rmse=per_context,
                per_step_rmse=np.sqrt(np.mean(err * err, axis=0)),
                n_contexts=n_ctx,
            )
        )
    return BenchmarkReport(series=reports, m=m, c=c, chunk=chunk)


# ---------------------------------------------------------------------------
# Benchmark file ingestion
# ---------------------------------------------------------------------------


def load_two_column_csv(
    path,
    u_column: int | str = 0,
    y_column: int | str = 1,
    delimiter: str = ",",
) -> BenchmarkSeries:
    """Parse an input/output recording. The header is auto-detected: if every
    cell of the first row parses as a float the file is headerless and
    columns are addressed by index."""
    with open(path, "r", newline="") as fh:
        rows = [(i, row) for i, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1)
                if row and any(cell.strip() for cell in row)]
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")

    def _is_float(cell: str) -> bool:
        try:
            float(cell)
            return True
        except ValueError:
            return False

    first_line, first = rows[0]
    has_header = not all(_is_float(cell) for cell in first)
    columns: dict[str, int] = {}
    if has_header:
        columns = {name.strip(): i for i, name in enumerate(first)}
        rows = rows[1:]
        if not rows:
            raise CsvFormatError(f"{path}: header but no data rows")

    def _resolve(col: int | str, role: str) -> int:
        if isinstance(col, int):
            return col
        if col not in columns:
            raise CsvFormatError(f"{path}: missing {role} column {col!r}")
        return columns[col]

    ui = _resolve(u_column, "input")
    yi = _resolve(y_column, "output")
    u_vals, y_vals = [], []
    for line_no, row in rows:
        if max(ui, yi) >= len(row):
            raise CsvFormatError(f"{path}: line {line_no}: expected at least "
                                 f"{max(ui, yi) + 1} columns, got {len(row)}")
        try:
            u_vals.append(float(row[ui]))
            y_vals.append(float(row[yi]))
        except ValueError as exc:
            raise CsvFormatError(f"{path}: line {line_no}: {exc}") from exc
    return BenchmarkSeries(
        u=np.array(u_vals), y=np.array(y_vals), name=os.path.splitext(os.path.basename(path))[0]
    )


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def _write_lines(path, lines: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _histogram_svg(hist: Histogram) -> str:
    width, height, pad = 640, 400, 40
    n = len(hist.counts)
    top = max(int(hist.counts.max()), 1)
    plot_w, plot_h = width - 2 * pad, height - 2 * pad
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
        'stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    bar_w = plot_w / n
    for i, count in enumerate(hist.counts):
        h = plot_h * int(count) / top
        x = pad + i * bar_w
        y = height - pad - h
        parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_w:.2f}" height="{h:.2f}" '
            'fill="steelblue"/>'
        )
    lo, hi = hist.bin_edges[0], hist.bin_edges[-1]
    parts.append(f'<text x="{pad}" y="{height - pad + 16}" font-size="12">{lo:g}</text>')
    parts.append(
        f'<text x="{width - pad}" y="{height - pad + 16}" font-size="12" '
        f'text-anchor="end">{hi:g}</text>'
    )
    parts.append(f'<text x="{pad - 4}" y="{pad}" font-size="12" text-anchor="end">{top}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def emit_report(report: EvalReport, out_dir) -> dict[str, str]:
    """Write report.json, per_task.csv, histogram.csv and histogram.svg.

    CSV layout: UTF-8, comma-separated, LF line endings, one header row.
    No timestamps, so reruns on the same report are byte-identical.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "report": os.path.join(out_dir, "report.json"),
        "per_task": os.path.join(out_dir, "per_task.csv"),
        "histogram": os.path.join(out_dir, "histogram.csv"),
        "histogram_svg": os.path.join(out_dir, "histogram.svg"),
    }
    with open(paths["report"], "w", newline="") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_lines(
        paths["per_task"],
        ["task_id,rmse"] + [f"{tid},{repr(r)}" for tid, r in report.per_task],
    )
    hist = report.histogram
    _write_lines(
        paths["histogram"],
        ["bin_left,bin_right,count"]
        + [
            f"{repr(float(lo))},{repr(float(hi))},{int(c)}"
            for lo, hi, c in zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts)
        ],
    )
    _write_lines(paths["histogram_svg"], [_histogram_svg(hist)])
    return paths


def write_benchmark_report(report: BenchmarkReport, out_dir) -> dict[str, str]:
    """benchmark.json plus one per-step RMSE CSV per test series."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {"report": os.path.join(out_dir, "benchmark.json")}
    with open(paths["report"], "w", newline="") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    for s in report.series:
        key = f"per_step_{s.name}"
        path = os.path.join(out_dir, f"per_step_rmse_{s.name}.csv")
        _write_lines(
            path,
            ["k,rmse"] + [f"{k + 1},{repr(float(r))}" for k, r in enumerate(s.per_step_rmse)],
        )
        paths[key] = path
    return paths
