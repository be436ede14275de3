"""Run artifacts: JSON result, CSV tables, and rendered figures.

CSV is the machine contract (comma separator, '.' decimal, header row,
full-precision floats via repr). JSON mirrors config keys in snake_case and
holds only reproducible content: metrics, the accuracy matrix, the config
echo, and the seed. Wall time is printed to the console but kept out of the
files so identical runs emit identical bytes.

Figures are rendered next to the tables: a budget trajectory per run, an
accuracy-matrix heatmap per run, and one cross-config summary.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .budget import BudgetLogRecord
from .continual import AccuracyMatrix, RunResult

BUDGET_CSV_FIELDS = ("step", "r_batch", "r_windowed", "lambda_rate",
                     "penalty", "loss")


def _fmt(x: float) -> str:
    # repr round-trips float64 exactly
    return repr(float(x))


# ---------------------------------------------------------------------------
# CSV tables


def write_matrix_csv(path, matrix: AccuracyMatrix) -> None:
    """Lower-triangular accuracy matrix; cells above the diagonal are empty."""
    K = matrix.K
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["after_task"] + [f"task_{k}" for k in range(K)])
        for j, row in enumerate(matrix.rows):
            writer.writerow([j] + [_fmt(v) for v in row] + [""] * (K - j - 1))


def read_matrix_csv(path) -> AccuracyMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "after_task":
            raise ValueError(f"{path}: not an accuracy-matrix CSV")
        rows = []
        for line in reader:
            if not line:
                continue
            j = int(line[0])
            vals = [float(v) for v in line[1:] if v != ""]
            if len(vals) != j + 1:
                raise ValueError(f"{path}: row {j} has {len(vals)} entries")
            rows.append(vals)
    return AccuracyMatrix(rows)


def write_budget_csv(path, log: list[BudgetLogRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BUDGET_CSV_FIELDS)
        for rec in log:
            writer.writerow([
                rec.step, _fmt(rec.r_batch), _fmt(rec.r_windowed),
                _fmt(rec.lambda_rate), _fmt(rec.penalty), _fmt(rec.loss),
            ])


def read_budget_csv(path) -> list[BudgetLogRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != BUDGET_CSV_FIELDS:
            raise ValueError(f"{path}: not a budget-log CSV")
        return [
            BudgetLogRecord(
                step=int(row["step"]),
                r_batch=float(row["r_batch"]),
                r_windowed=float(row["r_windowed"]),
                lambda_rate=float(row["lambda_rate"]),
                penalty=float(row["penalty"]),
                loss=float(row["loss"]),
            )
            for row in reader
        ]


# ---------------------------------------------------------------------------
# JSON result


def result_json_dict(result: RunResult) -> dict:
    return {
        "config": result.config.echo(),
        "dataset": result.dataset,
        "seed": result.seed,
        "metrics": {
            "acc": result.acc,
            "forgetting": result.forgetting,
            "bwt": result.bwt,
            "mean_spike_rate": result.mean_spike_rate,
        },
        "accuracy_matrix": result.matrix.rows,
    }


def write_run_json(path, result: RunResult) -> None:
    with open(path, "w") as fh:
        json.dump(result_json_dict(result), fh, sort_keys=True, indent=2)
        fh.write("\n")


def summary_line(result: RunResult) -> str:
    f = "n/a" if result.forgetting is None else f"{result.forgetting:.4f}"
    b = "n/a" if result.bwt is None else f"{result.bwt:+.4f}"
    return (
        f"{result.config.config_id} seed={result.seed} "
        f"ACC={result.acc:.4f} F={f} BWT={b} "
        f"spike%={100 * result.mean_spike_rate:.2f}"
    )


@dataclass
class SummaryRow:
    """Per-run digest used by the cross-config summary table and figure."""

    config_id: str
    seed: int
    acc: float
    forgetting: float | None
    bwt: float | None
    mean_spike_rate: float

    @classmethod
    def from_result(cls, r: RunResult) -> "SummaryRow":
        return cls(r.config.config_id, r.seed, r.acc, r.forgetting, r.bwt,
                   r.mean_spike_rate)

    @classmethod
    def from_json_file(cls, path) -> "SummaryRow":
        with open(path) as fh:
            doc = json.load(fh)
        m = doc["metrics"]
        return cls(doc["config"]["config_id"], doc["seed"], m["acc"],
                   m["forgetting"], m["bwt"], m["mean_spike_rate"])


def write_summary_csv(path, rows: list[SummaryRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_id", "seed", "acc", "forgetting", "bwt",
                         "mean_spike_rate"])
        for r in rows:
            writer.writerow([
                r.config_id, r.seed, _fmt(r.acc),
                "" if r.forgetting is None else _fmt(r.forgetting),
                "" if r.bwt is None else _fmt(r.bwt),
                _fmt(r.mean_spike_rate),
            ])


# ---------------------------------------------------------------------------
# Figures


def save_budget_figure(path, log: list[BudgetLogRecord], r_target: float) -> None:
    """Spike-rate trajectory and controller response over training steps."""
    steps = [rec.step for rec in log]
    fig, (ax_rate, ax_ctrl) = plt.subplots(
        2, 1, figsize=(8, 6), sharex=True,
        gridspec_kw={"height_ratios": [3, 2]},
    )
    ax_rate.plot(steps, [rec.r_batch for rec in log],
                 color="#9ecae1", lw=0.8, label="batch rate")
    ax_rate.plot(steps, [rec.r_windowed for rec in log],
                 color="#3182bd", lw=1.6, label="windowed rate")
    ax_rate.axhline(r_target, color="#de2d26", ls="--", lw=1.2, label="target")
    ax_rate.set_ylabel("hidden spike rate")
    ax_rate.legend(loc="upper right", fontsize=8)
    ax_rate.set_ylim(bottom=0)

    ax_ctrl.plot(steps, [rec.lambda_rate for rec in log],
                 color="#31a354", lw=1.4, label="lambda")
    ax_pen = ax_ctrl.twinx()
    ax_pen.plot(steps, [rec.penalty for rec in log],
                color="#756bb1", lw=0.9, alpha=0.7, label="penalty")
    ax_ctrl.set_xlabel("optimizer step")
    ax_ctrl.set_ylabel("lambda")
    ax_pen.set_ylabel("penalty")
    lines = ax_ctrl.get_lines() + ax_pen.get_lines()
    ax_ctrl.legend(lines, [l.get_label() for l in lines],
                   loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_matrix_figure(path, matrix: AccuracyMatrix, title: str = "") -> None:
    """Heatmap of the lower-triangular accuracy matrix."""
    K = matrix.K
    grid = np.full((K, K), np.nan)
    for j, row in enumerate(matrix.rows):
        grid[j, :len(row)] = row
    fig, ax = plt.subplots(figsize=(1.1 * K + 2, 1.0 * K + 1.5))
    masked = np.ma.masked_invalid(grid)
    im = ax.imshow(masked, cmap="viridis", vmin=0.0, vmax=1.0)
    for j in range(K):
        for k in range(j + 1):
            ax.text(k, j, f"{grid[j, k]:.2f}", ha="center", va="center",
                    color="white" if grid[j, k] < 0.6 else "black", fontsize=9)
    ax.set_xticks(range(K), [f"task {k}" for k in range(K)])
    ax.set_yticks(range(K), [f"after {j}" for j in range(K)])
    ax.set_xlabel("evaluated task")
    ax.set_ylabel("training progress")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.8, label="accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_summary_figure(path, rows: list[SummaryRow]) -> None:
    """Cross-config comparison: final ACC and mean spike rate, per seed."""
    by_config: dict[str, list[SummaryRow]] = {}
    for r in rows:
        by_config.setdefault(r.config_id, []).append(r)
    configs = sorted(by_config)
    accs = [[r.acc for r in by_config[c]] for c in configs]
    rates = [[100 * r.mean_spike_rate for r in by_config[c]] for c in configs]

    fig, (ax_acc, ax_rate) = plt.subplots(1, 2, figsize=(10, 4))
    x = np.arange(len(configs))
    for ax, values, label, color in (
        (ax_acc, accs, "final ACC", "#3182bd"),
        (ax_rate, rates, "mean spike rate (%)", "#31a354"),
    ):
        means = [float(np.mean(v)) for v in values]
        ax.bar(x, means, color=color, alpha=0.75)
        for i, vals in enumerate(values):
            ax.plot([i] * len(vals), vals, "o", color="#252525", ms=4)
        ax.set_xticks(x, configs)
        ax.set_ylabel(label)
        ax.grid(axis="y", alpha=0.3)
    ax_acc.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_run_artifacts(out_dir, result: RunResult, figures: bool = True) -> dict:
    """Write every per-run artifact; returns the path map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{result.config.config_id}_seed{result.seed}"
    paths = {
        "json": out / f"{stem}_result.json",
        "matrix_csv": out / f"{stem}_matrix.csv",
        "budget_csv": out / f"{stem}_budget.csv",
    }
    write_run_json(paths["json"], result)
    write_matrix_csv(paths["matrix_csv"], result.matrix)
    write_budget_csv(paths["budget_csv"], result.budget_log)
    if figures:
        paths["budget_png"] = out / f"{stem}_budget.png"
        paths["matrix_png"] = out / f"{stem}_matrix.png"
        save_budget_figure(paths["budget_png"], result.budget_log,
                           result.config.budget.r_target)
        save_matrix_figure(paths["matrix_png"], result.matrix,
                           title=f"{result.config.config_id} seed {result.seed}")
    return paths
