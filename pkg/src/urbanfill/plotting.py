"""PNG figures written next to the CSV/UGB outputs (Agg backend, no pyplot state)."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

# strip the version string so identical inputs give identical bytes
_PNG_META = {"Software": None}


def _save(fig: Figure, path) -> None:
    FigureCanvasAgg(fig)
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)


def heatmap_png(path, frame: np.ndarray, title: str = "") -> None:
    fig = Figure(figsize=(4, 4))
    ax = fig.add_subplot()
    im = ax.imshow(np.asarray(frame), cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title(title)
    ax.set_axis_off()
    _save(fig, path)


def error_map_png(path, values: np.ndarray, title: str = "signed error") -> None:
    """Red = overestimate, blue = underestimate, symmetric range."""
    v = np.asarray(values, dtype=np.float64)
    lim = float(np.abs(v).max()) or 1.0
    fig = Figure(figsize=(4, 4))
    ax = fig.add_subplot()
    im = ax.imshow(v, cmap="RdBu_r", vmin=-lim, vmax=lim, interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title(title)
    ax.set_axis_off()
    _save(fig, path)


def scenario_png(path, hours: Sequence[int], gt_mean: Sequence[float],
                 preds: Mapping[str, Sequence[float]], title: str = "") -> None:
    fig = Figure(figsize=(7, 3))
    ax = fig.add_subplot()
    ax.plot(hours, gt_mean, color="black", linewidth=1.5, label="ground truth")
    for name, series in preds.items():
        ax.plot(hours, series, linewidth=1, label=name)
    ax.set_xlabel("frame")
    ax.set_ylabel("mean over hole")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    _save(fig, path)


def convergence_png(path, curves: Mapping[str, tuple[Sequence[int], Sequence[float]]],
                    ylabel: str = "validation l1 hole") -> None:
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    for name, (x, y) in curves.items():
        ax.plot(x, y, marker="o", markersize=3, label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize="small")
    fig.tight_layout()
    _save(fig, path)
