"""Raster figures (PNG) rendered with matplotlib next to the SVG/PGM artifacts."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .report import HeatmapSample, mean_curves  # noqa: E402
from .train import ExperimentRecord  # noqa: E402


def plot_curves(records: list[ExperimentRecord], path: str | Path) -> Path:
    """Seed-mean target accuracy per method with a +-1 std band."""
    grouped: dict[str, list[list[float]]] = {}
    for r in records:
        grouped.setdefault(r.method, []).append([e.target_acc for e in r.epochs])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for method, mean in mean_curves(records).items():
        runs = np.array([c[: len(mean)] for c in grouped[method]])
        epochs = np.arange(len(mean))
        ax.plot(epochs, mean, label=method)
        if len(runs) > 1:
            std = runs.std(axis=0)
            ax.fill_between(epochs, mean - std, mean + std, alpha=0.15)
    ax.set_xlabel("epoch")
    ax.set_ylabel("target accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_heatmaps(samples: list[HeatmapSample], path: str | Path) -> Path:
    """Input, positive and negative maps in three rows, one column per sample."""
    n = max(len(samples), 1)
    fig, axes = plt.subplots(3, n, figsize=(1.4 * n, 4.4), squeeze=False)
    for j, s in enumerate(samples):
        for i, (img, title) in enumerate(((s.image, f"y={s.label}"), (s.pos, "pos"), (s.neg, "neg"))):
            ax = axes[i, j]
            ax.imshow(img, cmap="gray" if i == 0 else "inferno", vmin=0.0, vmax=1.0, interpolation="nearest")
            ax.set_title(title, fontsize=7)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
