"""Figures written next to the tabular reports: Gain/OG heatmaps, sweep curves,
and similarity-vs-outcome scatter plots."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsReport, matrix  # noqa: E402

STYLE = {
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "merge-forge",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata so repeated renders are byte-identical
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def _heatmap(ax, values, rows, cols, title):
    arr = np.asarray(values, dtype=float)
    lim = max(float(np.abs(arr).max()), 1e-9)
    im = ax.imshow(arr, cmap="RdBu_r", vmin=-lim, vmax=lim, aspect="auto")
    ax.set_xticks(range(len(cols)), labels=cols, rotation=60, ha="right")
    ax.set_yticks(range(len(rows)), labels=rows)
    for i in range(arr.shape[0]):
        for j in range(arr.shape[1]):
            v = arr[i, j]
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7,
                    color="white" if abs(v) > 0.6 * lim else "black")
    ax.set_title(title)
    return im


def gain_og_heatmaps(reports: Sequence[MetricsReport], path) -> Path:
    """Side-by-side Gain and Outperform Gap heatmaps, models by tasks."""
    rows, tasks, gains = matrix(reports, "gain")
    _, _, ogs = matrix(reports, "og")
    with plt.rc_context(STYLE):
        width = max(6.0, 0.55 * len(tasks) * 2 + 2)
        fig, axes = plt.subplots(1, 2, figsize=(width, 0.45 * len(rows) + 2.2))
        for ax, values, title in zip(axes, (gains, ogs), ("Gain", "Outperform Gap")):
            im = _heatmap(ax, values, rows, tasks, title)
            fig.colorbar(im, ax=ax, shrink=0.8)
        axes[1].set_yticks(range(len(rows)), labels=[""] * len(rows))
        fig.tight_layout()
        return _save(fig, path)


def sweep_curves(curves: Mapping[str, Sequence[tuple[float, float]]], path,
                 xlabel: str = "hyperparameter", ylabel: str = "Overall") -> Path:
    """One line per label of score against the swept hyperparameter."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for label, points in curves.items():
            xs, ys = zip(*sorted(points)) if points else ((), ())
            ax.plot(xs, ys, marker="o", ms=3, lw=1.2, label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def similarity_scatter(xs, ys, path, xlabel: str, ylabel: str, rho=None, p=None, labels=None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.0))
        ax.scatter(xs, ys, s=14)
        for x, y, lab in zip(xs, ys, labels or []):
            ax.annotate(lab, (x, y), fontsize=6, xytext=(2, 2), textcoords="offset points")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if rho is not None:
            ax.set_title(f"Spearman rho={rho:.3f}, p={p:.3g}")
        fig.tight_layout()
        return _save(fig, path)
