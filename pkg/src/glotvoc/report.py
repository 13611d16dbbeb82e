"""Delimited report files and the figures rendered alongside them."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bench import STAGES, BenchReport
from .glottal import Wavetables

__all__ = [
    "figure_path",
    "write_loss_csv",
    "write_restart_csv",
    "save_loss_figure",
    "save_bench_figure",
    "save_wavetable_figure",
]

plt.rc("figure", figsize=(7, 4))
plt.rc("axes", linewidth=0.6, grid=True)
plt.rc("grid", alpha=0.3)
plt.rc("font", size=9)


def figure_path(out_path) -> Path:
    return Path(out_path).with_suffix(".png")


def write_loss_csv(path, trace) -> None:
    """Loss trace with the `step,loss` header."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(np.asarray(trace, dtype=np.float64)):
            writer.writerow([step, repr(float(loss))])


def write_restart_csv(path, final_losses) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["restart", "final_loss"])
        for i, loss in enumerate(np.asarray(final_losses, dtype=np.float64)):
            writer.writerow([i, repr(float(loss))])


def save_loss_figure(traces, path, labels=None) -> None:
    """Loss curves, one line per restart, log-scaled when the data allows."""
    fig, ax = plt.subplots()
    for i, trace in enumerate(traces):
        trace = np.asarray(trace, dtype=np.float64)
        label = labels[i] if labels else f"restart {i}"
        ax.plot(np.arange(trace.shape[0]), trace, label=label, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if all(np.all(np.asarray(t) > 0.0) for t in traces):
        ax.set_yscale("log")
    if len(traces) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench_figure(report: BenchReport, path) -> None:
    """Stage breakdown bar chart with the measured RTF in the title."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    names = list(STAGES)
    values = [report.stage_medians[n] * 1e3 for n in names]
    ax.barh(names[::-1], values[::-1], color="steelblue")
    ax.set_xlabel("median time (ms)")
    ax.set_title(
        f"{report.duration:.1f} s render, {report.threads} thread(s): "
        f"RTF {report.rtf_median:.4f}"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_wavetable_figure(tables: Wavetables, path, max_rows: int = 16) -> None:
    """Family-of-pulses plot: a subset of rows, vertically offset, sorted by rd."""
    k = tables.row_count
    picks = np.unique(np.linspace(0, k - 1, min(max_rows, k)).astype(int))
    fig, ax = plt.subplots(figsize=(6, 5))
    spread = 2.5 * np.abs(tables.data[picks]).max()
    for rank, i in enumerate(picks):
        ax.plot(tables.data[i] + rank * spread, linewidth=0.8, color="black")
        ax.text(
            0,
            rank * spread,
            f"rd={tables.rd_values[i]:.2f}",
            fontsize=6,
            va="bottom",
        )
    ax.axvline(tables.align_index, color="crimson", linewidth=0.6, alpha=0.6)
    ax.set_yticks([])
    ax.set_xlabel("table column")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
