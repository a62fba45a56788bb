"""Matplotlib helpers shared by the report figures."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
    "image.origin": "lower",
}


def panel_figure(n_panels: int, ncols: int = 4, size: float = 2.6):
    ncols = max(1, min(ncols, n_panels))
    nrows = math.ceil(n_panels / ncols)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(nrows, ncols, figsize=(size * ncols, size * nrows), squeeze=False)
    for ax in axes.flat[n_panels:]:
        ax.set_axis_off()
    return fig, list(axes.flat[:n_panels])


def show_field(ax, field, *, vmin=None, vmax=None, cmap="viridis", title=None, colorbar=True):
    with plt.rc_context(RC):
        im = ax.imshow(np.asarray(field), vmin=vmin, vmax=vmax, cmap=cmap, origin="lower")
        ax.set_xticks([])
        ax.set_yticks([])
        if title:
            ax.set_title(title)
        if colorbar:
            ax.figure.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    return im


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(RC):
        fig.savefig(path)
    plt.close(fig)
    return path


def finite_range(*fields) -> tuple[float, float]:
    vals = np.concatenate([np.asarray(f, dtype=float).ravel() for f in fields])
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return 0.0, 1.0
    lo, hi = float(vals.min()), float(vals.max())
    return (lo, hi) if hi > lo else (lo, lo + 1.0)
