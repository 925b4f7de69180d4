"""Figure and raster output for sampled chains.

Figures use matplotlib's Agg backend and are only ever written to files.
Image grids are written as binary PGM so they need no plotting library.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _mark_centers(ax, meta) -> None:
    centers = getattr(meta, "centers", None)
    if centers is not None:
        ax.scatter(centers[:, 0], centers[:, 1], marker="x", c="k", s=30, linewidths=1)


def chain_scatter(path, states, meta=None, max_points: int = 2000, title: str = "") -> None:
    """One panel per chain state, showing the first two x coordinates."""
    plt = _pyplot()
    n = len(states)
    cols = min(n, 5)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.6 * cols, 2.6 * rows), squeeze=False)
    for ax in axes.ravel()[n:]:
        ax.axis("off")
    for ax, state in zip(axes.ravel(), states):
        x = state.x.data[:max_points]
        if x.shape[1] < 2:
            raise DimensionError("scatter plots need at least two x coordinates")
        ax.scatter(x[:, 0], x[:, 1], s=2, alpha=0.5)
        _mark_centers(ax, meta)
        ax.set_title(f"step {state.step}", fontsize=9)
        ax.set_aspect("equal", adjustable="datalim")
        ax.tick_params(labelsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def latent_scatter(path, z, labels=None, title: str = "") -> None:
    plt = _pyplot()
    z = np.asarray(z)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(z[:, 0], z[:, 1] if z.shape[1] > 1 else np.zeros(len(z)), s=3,
               c=None if labels is None else labels, cmap="tab10", alpha=0.6)
    ax.set_xlabel("z0")
    ax.set_ylabel("z1")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def coverage_series(path, steps, fractions, unassigned=None) -> None:
    """Per-mode sample fraction against chain step (log x axis)."""
    plt = _pyplot()
    fractions = np.asarray(fractions)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for k in range(fractions.shape[1]):
        ax.plot(steps, fractions[:, k], lw=1, label=f"mode {k}")
    if unassigned is not None:
        ax.plot(steps, unassigned, "k--", lw=1, label="unassigned")
    ax.set_xscale("log")
    ax.set_xlabel("chain step")
    ax.set_ylabel("fraction of samples")
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def inpaint_histogram(path, free_values, bins: int = 40, reference=None) -> None:
    """Histogram of one free coordinate, optionally against reference samples."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.hist(np.ravel(free_values), bins=bins, density=True, alpha=0.6, label="inpainted")
    if reference is not None:
        ax.hist(np.ravel(reference), bins=bins, density=True, histtype="step", color="k", label="exact")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_pgm_grid(path, images, rows: int, cols: int, ncol: int = 8, pad: int = 1) -> None:
    """Tile flattened images with values in [0, 1] into one 8-bit binary PGM."""
    images = np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)
    if images.ndim != 2 or images.shape[1] != rows * cols:
        raise DimensionError(f"images of shape {images.shape} are not {rows}x{cols} rasters")
    n = images.shape[0]
    ncol = max(1, min(ncol, n))
    nrow = math.ceil(n / ncol)
    h, w = nrow * (rows + pad) + pad, ncol * (cols + pad) + pad
    canvas = np.zeros((h, w), dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, ncol)
        top, left = pad + r * (rows + pad), pad + c * (cols + pad)
        canvas[top:top + rows, left:left + cols] = np.round(img.reshape(rows, cols) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(canvas.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
