"""Figure rendering for the report paths (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .grid import Box, Heatmap
from .metrics import EvalReport


def save_heatmap_figure(
    grids: Mapping[str, Heatmap | np.ndarray],
    path: str | Path,
    boxes: Sequence[tuple[Box, float]] = (),
    stride: float = 1.0,
) -> None:
    """Panel of heatmaps, optionally with decoded boxes over the first one."""
    names = list(grids)
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 4), squeeze=False)
    for ax, name in zip(axes[0], names):
        data = grids[name]
        arr = data.data if isinstance(data, Heatmap) else np.asarray(data)
        im = ax.imshow(arr, origin="upper", cmap="magma", interpolation="nearest")
        ax.set_title(name)
        fig.colorbar(im, ax=ax, fraction=0.046)
    for box, score in boxes:
        ax = axes[0][0]
        xs = np.array([box.x0, box.x1, box.x1, box.x0, box.x0]) / stride
        ys = np.array([box.y0, box.y0, box.y1, box.y1, box.y0]) / stride
        ax.plot(xs, ys, color="cyan", linewidth=1.2)
        ax.text(xs[0], ys[0], f"{score:.2f}", color="cyan", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_loss_curve(losses: Sequence[float], path: str | Path, window: int = 10) -> None:
    """Raw and moving-average training loss on a log scale."""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(losses))
    ax.plot(xs, losses, alpha=0.35, label="per step")
    if len(losses) >= window:
        kernel = np.ones(window) / window
        smooth = np.convolve(losses, kernel, mode="valid")
        ax.plot(xs[window - 1 :], smooth, label=f"mean of {window}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_metric_bars(reports: Mapping[str, EvalReport], path: str | Path) -> None:
    """Grouped AP / AP50 / AP75 bars, one group per evaluated task."""
    names = list(reports)
    metrics = ("ap", "ap50", "ap75")
    fig, ax = plt.subplots(figsize=(1.8 * max(len(names), 2) + 2, 4))
    base = np.arange(len(names), dtype=float)
    width = 0.25
    for j, metric in enumerate(metrics):
        vals = [getattr(reports[n], metric) for n in names]
        ax.bar(base + (j - 1) * width, vals, width, label=metric.upper())
    ax.set_xticks(base)
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("average precision")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
