"""Metrics streams, delimited tables, and figure rendering.

Metrics are line-delimited records (one JSON object per line) with fields
run_id, epoch, split, metric, value.  Tables are plain CSV.  Figures are
rendered with matplotlib to SVG files next to the delimited output.
"""

from __future__ import annotations

import csv
import json


def write_metrics(path, records, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_table(path, rows, columns=None) -> None:
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


def plot_loss_curves(path, metrics, metric: str = "loss_mean") -> None:
    """Epoch-vs-loss line chart, one line per run_id in the stream."""
    plt = _pyplot()
    series: dict[str, list[tuple[int, float]]] = {}
    for rec in metrics:
        if rec.get("metric") == metric:
            series.setdefault(rec["run_id"], []).append((rec["epoch"], rec["value"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for run_id, points in series.items():
        points.sort()
        ax.plot([p[0] for p in points], [p[1] for p in points], label=run_id)
    ax.set_xlabel("epoch")
    ax.set_ylabel(metric)
    ax.grid(True, alpha=0.3)
    if series:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_sweep(path, rows, x_key: str = "c", y_key: str = "accuracy") -> None:
    """Bar chart of probe accuracy per swept value."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [str(r[x_key]) for r in rows]
    ys = [r[y_key] for r in rows]
    ax.bar(xs, ys, color="#4878a8")
    ax.set_xlabel(x_key)
    ax.set_ylabel(y_key)
    ax.set_ylim(0, 1)
    for i, v in enumerate(ys):
        ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
