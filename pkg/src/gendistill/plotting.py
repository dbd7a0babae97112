"""Figures written next to the text reports: image grids, accuracy bars, loss curves."""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import DistilledDataset, Provenance  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def _groups(ds: DistilledDataset) -> "OrderedDict[int, list[int]]":
    """Indices grouped by source image; un-expanded images form singleton groups."""
    groups: OrderedDict[int, list[int]] = OrderedDict()
    for i, src in enumerate(ds.source.tolist()):
        key = src if src >= 0 else -(i + 1)
        groups.setdefault(key, []).append(i)
    return groups


def grid_layout(ds: DistilledDataset, classes: int, factor: int) -> list[list[int]]:
    """Dataset indices for a ``factor`` x ``classes`` grid.

    Column ``k`` shows the first source image of class ``k``: its original
    on the top row, augmented copies below.
    """
    if classes < 1 or factor < 1:
        raise ValueError("classes and factor must be >= 1")
    if ds.num_classes < classes or len(ds) == 0:
        raise ValueError(f"dataset has {ds.num_classes} classes (ipc {ds.ipc}), {classes} requested")
    columns = []
    groups = list(_groups(ds).values())
    for k in range(classes):
        pick = None
        for g in groups:
            if int(ds.labels[g[0]]) != k or len(g) < factor:
                continue
            originals = [i for i in g if ds.provenance[i] is not Provenance.AUGMENTED]
            augmented = [i for i in g if ds.provenance[i] is Provenance.AUGMENTED]
            ordered = originals[:1] + augmented
            if len(ordered) >= factor:
                pick = ordered[:factor]
                break
        if pick is None:
            raise ValueError(f"class {ds.registry.name(k)!r} has no source image with {factor} copies")
        columns.append(pick)
    return [[columns[k][r] for k in range(classes)] for r in range(factor)]


def image_grid(ds: DistilledDataset, classes: int, factor: int, path: str | Path) -> tuple[int, int]:
    """Write the grid figure; returns ``(rows, cols)``."""
    layout = grid_layout(ds, classes, factor)
    rows, cols = len(layout), len(layout[0])
    imgs = ds.images.to_unit().data
    with plt.rc_context(RC):
        fig, axes = plt.subplots(rows, cols, figsize=(1.1 * cols, 1.1 * rows), squeeze=False)
        for r in range(rows):
            for c in range(cols):
                ax = axes[r][c]
                img = imgs[layout[r][c]].permute(1, 2, 0).numpy()
                ax.imshow(img.squeeze(), cmap="gray" if img.shape[-1] == 1 else None, vmin=0, vmax=1,
                          interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if r == 0:
                    ax.set_title(ds.registry.name(c).replace("_", " "), fontsize=7)
            axes[r][0].set_ylabel("original" if r == 0 else f"PDA {r}", fontsize=7)
        fig.subplots_adjust(wspace=0.05, hspace=0.05)
        _save(fig, path)
    return rows, cols


def accuracy_figure(reports: Sequence, path: str | Path) -> Path:
    """Bar chart of ``mean ± std`` accuracy, one bar per report."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(3.0, 1.2 * len(reports)), 2.6))
        x = np.arange(len(reports))
        means = [r.mean for r in reports]
        stds = [r.std for r in reports]
        ax.bar(x, means, yerr=stds, capsize=3, color="0.55", edgecolor="0.2", linewidth=0.6)
        ax.set_xticks(x)
        ax.set_xticklabels([f"{r.label or r.dataset}\nIPC {r.ipc}" for r in reports])
        ax.set_ylabel("test accuracy")
        for xi, m, s in zip(x, means, stds):
            ax.text(xi, m + s, f"{m:.4f}", ha="center", va="bottom", fontsize=7)
        return _save(fig, path)


def curves_figure(curves: Mapping[str, Sequence[float]], path: str | Path, ylabel: str = "loss",
                  xlabel: str = "epoch") -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        for name, values in curves.items():
            ax.plot(np.arange(1, len(values) + 1), values, lw=1, label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(curves) > 1:
            ax.legend(frameon=False)
        return _save(fig, path)


def add_history_figure(history: Mapping[str, np.ndarray], path: str | Path, window: int = 20) -> Path:
    """Four panels (gen_adv, disc, distill, r1) with a moving average overlay."""
    keys = ("gen_adv", "disc", "distill", "r1")
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 4, figsize=(10.0, 2.4))
        steps = history["step"]
        for ax, k in zip(axes, keys):
            v = np.asarray(history[k], dtype=float)
            ax.plot(steps, v, lw=0.5, color="0.7")
            if len(v) >= window:
                ma = np.convolve(v, np.ones(window) / window, mode="valid")
                ax.plot(steps[window - 1:], ma, lw=1.2, color="C0")
            ax.set_title(k)
            ax.set_xlabel("step")
        fig.tight_layout()
        return _save(fig, path)
