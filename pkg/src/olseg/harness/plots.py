"""Figures written by the CLI: B-scan overlays, loss curves, per-surface errors."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib as mpl  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402
import numpy as np  # noqa: E402

from ..dataio import SURFACE_NAMES  # noqa: E402

SURFACE_COLORS = ("#e41a1c", "#ff7f00", "#4daf4a", "#377eb8", "#984ea3")
RUN_COLORS = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e")

STYLE = {
    "font.family": "sans-serif",
    "font.size": 8,
    "axes.labelsize": 8,
    "axes.titlesize": 9,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "lines.linewidth": 1.0,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "xtick.major.width": 0.6,
    "ytick.major.width": 0.6,
    "savefig.dpi": 150,
}
OVERLAY_DPI = 100


def overlay(path, image: np.ndarray, pred: np.ndarray, truth: np.ndarray | None = None,
            valid: np.ndarray | None = None) -> Path:
    """Save ``image`` at its own pixel size with predicted (solid) and true (dashed) surfaces.

    ``pred`` and ``truth`` are ``(K, W)`` rows in the image's coordinates.
    """
    h, w = image.shape
    cols = np.arange(w)
    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(w / OVERLAY_DPI, h / OVERLAY_DPI), dpi=OVERLAY_DPI)
        ax = fig.add_axes((0, 0, 1, 1))
        ax.imshow(image, cmap="gray", vmin=0, vmax=1, interpolation="nearest", aspect="auto")
        for k, rows in enumerate(pred):
            ax.plot(cols, rows, color=SURFACE_COLORS[k % len(SURFACE_COLORS)], lw=0.8)
        if truth is not None:
            for k, rows in enumerate(truth):
                shown = np.where(valid[k], rows, np.nan) if valid is not None else rows
                ax.plot(cols, shown, color="white", lw=0.6, ls=(0, (3, 2)))
        ax.set_xlim(-0.5, w - 0.5)
        ax.set_ylim(h - 0.5, -0.5)
        ax.set_axis_off()
        fig.savefig(path, dpi=OVERLAY_DPI)
    return Path(path)


def plot_loss_curves(logs: dict[str, list[dict]], path) -> Path:
    """Training loss and validation MAD per epoch, one line per run."""
    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(6.4, 2.6))
        ax_loss, ax_mad = fig.subplots(1, 2)
        for i, (label, rows) in enumerate(logs.items()):
            color = RUN_COLORS[i % len(RUN_COLORS)]
            epochs = [r["epoch"] for r in rows]
            ax_loss.plot(epochs, [r["loss"] for r in rows], color=color, label=label)
            mads = [(r["epoch"], r["val_mad"]) for r in rows if r["val_mad"] is not None]
            if mads:
                ax_mad.plot(*zip(*mads), color=color, marker="o", ms=2, label=label)
        ax_loss.set(xlabel="epoch", ylabel="training loss", yscale="log")
        ax_mad.set(xlabel="epoch", ylabel="validation MAD (px)")
        ax_loss.legend()
        fig.tight_layout()
        fig.savefig(path)
    return Path(path)


def plot_metrics(reports: dict[str, dict[str, dict[str, float]]], path) -> Path:
    """Grouped bars of per-surface MAD with std error bars, one group per surface."""
    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(6.4, 2.6))
        ax = fig.subplots()
        labels = list(reports)
        names = [n for n in next(iter(reports.values())) if n in SURFACE_NAMES or n == "Average"]
        x = np.arange(len(names))
        width = 0.8 / max(len(labels), 1)
        for i, label in enumerate(labels):
            rows = reports[label]
            ax.bar(x + (i - (len(labels) - 1) / 2) * width,
                   [rows[n]["mad_mean"] for n in names], width,
                   yerr=[rows[n]["mad_std"] for n in names],
                   color=RUN_COLORS[i % len(RUN_COLORS)], label=label,
                   error_kw={"elinewidth": 0.6, "capsize": 1.5})
        ax.set_xticks(x, names)
        ax.set_ylabel("MAD (px)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
    return Path(path)
