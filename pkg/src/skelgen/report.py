"""Report rendering: delimited output plus matplotlib figures on disk.

Used by the CLI to leave both machine-readable CSVs and quick-look PNGs
next to each other in the output directory.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from skelgen.metrics import MetricReport


def save_loss_csv(path, losses) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for step, value in enumerate(losses):
            fh.write(f"{step},{value:.17g}\n")


def load_loss_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)[:, 1]


def render_loss_curve(path, losses, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(len(losses)), losses, lw=1.5)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_metric_bars(path, report: MetricReport, title: str = "metrics") -> None:
    """Bar chart of the report's scaled values, one bar per metric."""
    ids = sorted(report.values)
    scaled = [report.values[m] * report._scale(m) for m in ids]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(ids)), 4))
    ax.bar(range(len(ids)), scaled, color="#4878a8")
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(ids, rotation=30, ha="right")
    ax.set_ylabel("scaled value")
    ax.set_title(title)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
