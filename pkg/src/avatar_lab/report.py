"""Report rendering: delimited metric tables plus matplotlib figures.

Every reporting path writes both forms side by side — a CSV for machine
consumption and PNG figures for eyeballs. Figures use the Agg backend so
reports render identically on headless machines.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def write_csv(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    fieldnames = list(rows[0].keys())
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            records.append(json.loads(line))
    return records


def plot_training_curves(log_path: str | Path, out_png: str | Path, title: str = "") -> None:
    """Loss components vs. step from a line-delimited JSON training log."""
    records = [r for r in read_jsonl(log_path) if "step" in r and "loss" in r]
    if not records:
        return
    steps = [r["step"] for r in records]
    keys = sorted(records[0]["loss"].keys())
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for key in keys:
        ax.plot(steps, [r["loss"].get(key, float("nan")) for r in records], label=key, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8, ncol=2)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    Path(out_png).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def plot_metric_bars(metrics: dict[str, float], out_png: str | Path, title: str = "metrics") -> None:
    names = list(metrics.keys())
    values = [metrics[k] for k in names]
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(names), 3.6))
    bars = ax.bar(names, values, color="#4878a8")
    for bar, val in zip(bars, values):
        ax.text(
            bar.get_x() + bar.get_width() / 2,
            bar.get_height(),
            f"{val:.3g}",
            ha="center",
            va="bottom",
            fontsize=8,
        )
    ax.set_title(title)
    ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    Path(out_png).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def save_image_grid(
    images: list[np.ndarray], out_png: str | Path, ncols: int = 4, titles: list[str] | None = None
) -> None:
    if not images:
        return
    n = len(images)
    ncols = min(ncols, n)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.2 * ncols, 2.4 * nrows), squeeze=False)
    for k in range(nrows * ncols):
        ax = axes[k // ncols][k % ncols]
        ax.axis("off")
        if k < n:
            img = np.clip(np.asarray(images[k]), 0.0, 1.0)
            ax.imshow(img, interpolation="nearest")
            if titles and k < len(titles):
                ax.set_title(titles[k], fontsize=7)
    fig.tight_layout()
    Path(out_png).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
