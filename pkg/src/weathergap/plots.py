"""Plot emission for run directories.

Every plot gets a data sidecar CSV with exactly the numbers drawn, so
plot correctness is testable without image comparison.
"""

from __future__ import annotations

import csv
import glob
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evaluator import EvalReport
from .scenes import atomic_text_write
from .trainer import CSV_COLUMNS


class PlotError(RuntimeError):
    pass


def read_metrics(csv_path: str) -> list[dict]:
    with open(csv_path, "r", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    if not rows:
        raise PlotError(f"{csv_path} has no data rows")
    return rows


def _series(rows: list[dict], column: str) -> tuple[list[int], list[float]]:
    steps, values = [], []
    for row in rows:
        cell = row.get(column, "")
        if cell:
            steps.append(int(row["step"]))
            values.append(float(cell))
    return steps, values


def _write_sidecar(path: str, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    atomic_text_write(path, "\n".join(lines) + "\n")


def plot_loss_curves(run_dir: str, out_dir: str) -> list[str]:
    rows = read_metrics(os.path.join(run_dir, "metrics.csv"))
    name = os.path.basename(os.path.normpath(run_dir))
    fig, ax = plt.subplots(figsize=(7, 4))
    sidecar_rows = []
    for column in ("L_det", "L_sty", "L_wea", "total"):
        steps, values = _series(rows, column)
        if values:
            ax.plot(steps, values, label=column)
    for row in rows:
        sidecar_rows.append([row[c] for c in CSV_COLUMNS])
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(f"loss curves: {name}")
    ax.legend()
    fig.tight_layout()
    png = os.path.join(out_dir, f"loss_curves_{name}.png")
    fig.savefig(png)
    plt.close(fig)
    sidecar = os.path.join(out_dir, f"loss_curves_{name}.csv")
    _write_sidecar(sidecar, list(CSV_COLUMNS), sidecar_rows)
    return [png, sidecar]


def plot_pos_cosine(run_dir: str, out_dir: str) -> list[str]:
    rows = read_metrics(os.path.join(run_dir, "metrics.csv"))
    steps, values = _series(rows, "pos_cosine")
    if not values:
        return []
    name = os.path.basename(os.path.normpath(run_dir))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, values)
    ax.set_xlabel("step")
    ax.set_ylabel("mean positive-pair cosine")
    ax.set_title(f"clean/weather embedding similarity: {name}")
    fig.tight_layout()
    png = os.path.join(out_dir, f"pos_cosine_{name}.png")
    fig.savefig(png)
    plt.close(fig)
    sidecar = os.path.join(out_dir, f"pos_cosine_{name}.csv")
    _write_sidecar(sidecar, ["step", "pos_cosine"], [[s, f"{v:.10g}"] for s, v in zip(steps, values)])
    return [png, sidecar]


def plot_map_bars(run_dirs: list[str], out_dir: str) -> list[str]:
    """One bar per eval report found in the run directories."""
    labels, values = [], []
    for run_dir in run_dirs:
        name = os.path.basename(os.path.normpath(run_dir))
        for path in sorted(glob.glob(os.path.join(run_dir, "eval_*.json"))):
            report = EvalReport.load(path)
            split = os.path.splitext(os.path.basename(path))[0][len("eval_") :]
            labels.append(f"{name}:{split}")
            values.append(report.map50)
    if not values:
        return []
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(values)), 4))
    ax.bar(range(len(values)), values)
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("mAP@0.5")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    png = os.path.join(out_dir, "map_bars.png")
    fig.savefig(png)
    plt.close(fig)
    sidecar = os.path.join(out_dir, "map_bars.csv")
    _write_sidecar(sidecar, ["label", "map50"], [[l, f"{v:.10g}"] for l, v in zip(labels, values)])
    return [png, sidecar]


def emit_plots(run_dirs: list[str], out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written: list[str] = []
    for run_dir in run_dirs:
        written += plot_loss_curves(run_dir, out_dir)
        written += plot_pos_cosine(run_dir, out_dir)
    written += plot_map_bars(run_dirs, out_dir)
    return written
