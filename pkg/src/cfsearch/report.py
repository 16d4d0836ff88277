"""Run artifacts a person actually reads: curves, tables, figures.

Searches leave behind a history file; everything here derives from it. Curve
files are two plain columns so any plotting tool can consume them, tables come
as CSV plus an aligned text rendering, and the figures are drawn from the same
curve data the text files carry.
"""

import csv
import logging
import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .cfmodel import display_stages, parse_model_text
from .errors import ConfigError
from .search import SearchHistory, best_so_far_curve

log = logging.getLogger(__name__)

CURVE_NAME = "curve.txt"
FIGURE_DPI = 120


def _format_value(v):
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def write_curve(path, records, metric_name):
    """Two columns per evaluation: index (from 1) and best value so far."""
    curve = best_so_far_curve(records, metric_name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# evaluation best_{metric_name}\n")
        for i, v in enumerate(curve, start=1):
            fh.write(f"{i} {_format_value(v)}\n")


def read_curve(path):
    """Inverse of write_curve: [(evaluation, best value), ...]."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if len(parts) != 2:
                    raise ValueError(f"expected two columns, got {len(parts)}")
                out.append((int(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise ConfigError(f"curve file {path} line {lineno}: {exc}") from None
    return out


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def aligned_table(header, rows):
    """Fixed-width text rendering of a header and rows, all stringified."""
    cells = [[str(c) for c in row] for row in [list(header)] + [list(r) for r in rows]]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def top_rows(records, metric_name, k=3):
    """(header, rows) for the k best records: stage tuple, size, rate, metrics."""
    history = SearchHistory(metric_name)
    for rec in records:
        history.append(rec)
    best = [r for r in history.top(k) if not r.failed]
    test_keys = sorted({key for r in best for key in r.test_metrics})
    header = ["rank", "model", "d", "lr", f"val_{metric_name}"]
    header += [f"test_{key}" for key in test_keys]
    rows = []
    for rank, rec in enumerate(best, start=1):
        stages, d, lr = parse_model_text(rec.config_text)
        row = [rank, display_stages(stages), d, lr, _format_value(rec.value)]
        for key in test_keys:
            value = rec.test_metrics.get(key)
            row.append("" if value is None else _format_value(value))
        rows.append(row)
    return header, rows


def _finite_tail(curve_points):
    """Drop the leading points whose value is not finite (nothing trained yet)."""
    for i, (_, v) in enumerate(curve_points):
        if math.isfinite(v):
            return curve_points[i:]
    return []


def render_curve_figure(labeled_curves, metric_name, out_path):
    """Step plot of best-so-far curves; one line per labeled run."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    drew = False
    for label, points in labeled_curves:
        points = _finite_tail(points)
        if not points:
            log.warning("curve %r has no finite values; not drawn", label)
            continue
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        ax.step(xs, ys, where="post", label=label)
        drew = True
    ax.set_xlabel("models evaluated")
    ax.set_ylabel(f"best validation {metric_name}")
    if drew:
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=FIGURE_DPI)
    plt.close(fig)


def render_history_figure(records, metric_name, out_path):
    """Every evaluation's own value as dots, the running best as a step line."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    xs = [i for i, r in enumerate(records, start=1) if math.isfinite(r.value)]
    ys = [r.value for r in records if math.isfinite(r.value)]
    ax.scatter(xs, ys, s=12, alpha=0.6, label="evaluation")
    curve = _finite_tail(
        list(enumerate(best_so_far_curve(records, metric_name), start=1))
    )
    if curve:
        ax.step([p[0] for p in curve], [p[1] for p in curve], where="post",
                color="C1", label="best so far")
    n_failed = sum(r.failed for r in records)
    if n_failed:
        ax.set_title(f"{n_failed} failed evaluation(s) not shown")
    ax.set_xlabel("models evaluated")
    ax.set_ylabel(f"validation {metric_name}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=FIGURE_DPI)
    plt.close(fig)


def summarize_runs(run_entries, metric_name):
    """(header, rows): one summary row per run for the comparison table."""
    header = ["label", "strategy", "evaluations", f"best_{metric_name}", "best_model"]
    rows = []
    for label, header_doc, records in run_entries:
        history = SearchHistory(metric_name)
        for rec in records:
            history.append(rec)
        best = history.best
        rows.append([
            label,
            header_doc["spec"]["strategy"],
            len(records),
            "" if best is None else _format_value(best.value),
            "" if best is None else best.config_text,
        ])
    return header, rows
