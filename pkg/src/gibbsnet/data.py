"""Synthetic datasets with known structure, and an IDX raster loader."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, UnsupportedError

IDX_UBYTE_IMAGES = 0x00000803
IDX_UBYTE_LABELS = 0x00000801


@dataclass
class MixtureMeta:
    """Isotropic Gaussian mixture: ``centers[k]``, common ``sigma``, mixing ``weights``."""

    centers: np.ndarray
    sigma: float
    weights: np.ndarray

    @property
    def n_modes(self) -> int:
        return self.centers.shape[0]

    def to_dict(self) -> dict:
        return {"kind": "mixture", "centers": self.centers.tolist(), "sigma": self.sigma,
                "weights": self.weights.tolist()}


@dataclass
class ManifoldMeta:
    kind: str
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray | None = None
    meta: object = None
    name: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise DimensionError(f"dataset rows must be 2-D, got {self.x.shape}")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("dataset contains non-finite values")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (self.x.shape[0],):
                raise DimensionError(f"{self.y.shape} labels for {self.x.shape[0]} rows")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def n_labels(self) -> int:
        return 0 if self.y is None else int(self.y.max()) + 1

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = [f"x{i}" for i in range(self.dim)] + (["y"] if self.y is not None else [])
            w.writerow(header)
            for i in range(len(self)):
                row = [repr(float(v)) for v in self.x[i]]
                if self.y is not None:
                    row.append(int(self.y[i]))
                w.writerow(row)


def ring_centers(k: int, radius: float, phase: float = 0.0) -> np.ndarray:
    angles = phase + 2.0 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def gaussian_mixture(k: int, n: int, radius: float = 2.0, sigma: float = 0.05, seed: int = 0,
                     labeled: bool = True, phase: float = 0.0) -> Dataset:
    """``n`` points from ``k`` equally weighted modes spaced evenly on a circle.

    Mode ``i`` sits at angle ``phase + 2 pi i / k``; labels are mode indices.
    """
    if k < 1:
        raise ConfigError(f"need at least one mode, got {k}")
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    if n < k:
        raise ConfigError(f"n={n} is smaller than the number of modes {k}")
    rng = np.random.default_rng(seed)
    centers = ring_centers(k, radius, phase)
    labels = rng.integers(0, k, size=n)
    x = centers[labels] + sigma * rng.standard_normal((n, 2))
    meta = MixtureMeta(centers, float(sigma), np.full(k, 1.0 / k))
    return Dataset(x, labels if labeled else None, meta, f"ring{k}")


def swiss_roll_2d(n: int, noise: float = 0.0, seed: int = 0, t_min: float = 1.5 * np.pi,
                  t_max: float = 4.5 * np.pi, scale: float = 0.2) -> Dataset:
    """Planar spiral ``scale * t * (cos t, sin t)`` with t uniform on [t_min, t_max]."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    t = rng.uniform(t_min, t_max, size=n)
    x = scale * np.stack([t * np.cos(t), t * np.sin(t)], axis=1)
    if noise:
        x = x + noise * rng.standard_normal((n, 2))
    meta = ManifoldMeta("swiss_roll", {"t_min": t_min, "t_max": t_max, "scale": scale, "noise": noise})
    return Dataset(x, None, meta, "swiss_roll")


def two_moons(n: int, noise: float = 0.0, seed: int = 0) -> Dataset:
    """Two interleaved unit half-circles; label 0 is the upper arc.

    Upper arc: centre (0, 0), angles in [0, pi].  Lower arc: centre
    (1, 0.5), angles in [pi, 2 pi].
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    n_upper = n - n // 2
    n_lower = n // 2
    th_u = rng.uniform(0.0, np.pi, size=n_upper)
    th_l = rng.uniform(np.pi, 2.0 * np.pi, size=n_lower)
    upper = np.stack([np.cos(th_u), np.sin(th_u)], axis=1)
    lower = np.stack([1.0 + np.cos(th_l), 0.5 + np.sin(th_l)], axis=1)
    x = np.concatenate([upper, lower])
    y = np.concatenate([np.zeros(n_upper, dtype=np.int64), np.ones(n_lower, dtype=np.int64)])
    if noise:
        x = x + noise * rng.standard_normal(x.shape)
    meta = ManifoldMeta("two_moons", {"centers": [[0.0, 0.0], [1.0, 0.5]], "radius": 1.0, "noise": noise})
    return Dataset(x, y, meta, "two_moons")


@dataclass
class ConditionalMixture:
    """Posterior over modes and per-mode Gaussians of the free coordinates."""

    weights: np.ndarray  # [K] or [batch, K]
    means: np.ndarray  # [K, n_free]
    sigma: float
    free: np.ndarray  # indices of free coordinates


def exact_conditional(meta, observed, mask) -> ConditionalMixture:
    """Exact conditional of the free coordinates given observed ones.

    ``observed`` holds values of the observed coordinates only (shape
    [n_obs] or [batch, n_obs]); ``mask[j]`` is True for observed ``j``.
    With an isotropic covariance the free coordinates are independent of the
    observed ones within a mode, so only the mode weights change.
    """
    if not isinstance(meta, MixtureMeta):
        raise UnsupportedError(f"exact conditionals need a Gaussian mixture, got {type(meta).__name__}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (meta.centers.shape[1],):
        raise DimensionError(f"mask width {mask.shape} != data width {meta.centers.shape[1]}")
    obs = np.asarray(observed, dtype=np.float64)
    single = obs.ndim == 1
    obs = np.atleast_2d(obs)
    if obs.shape[1] != mask.sum():
        raise DimensionError(f"{obs.shape[1]} observed values for {int(mask.sum())} observed coordinates")
    c_obs = meta.centers[:, mask]
    d2 = ((obs[:, None, :] - c_obs[None, :, :]) ** 2).sum(axis=2)
    logw = np.log(meta.weights)[None, :] - 0.5 * d2 / meta.sigma ** 2
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    free = np.flatnonzero(~mask)
    return ConditionalMixture(w[0] if single else w, meta.centers[:, free], meta.sigma, free)


def nearest_mode(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of and distance to the nearest center for each row of ``x``."""
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    idx = d2.argmin(axis=1)
    return idx, np.sqrt(d2[np.arange(x.shape[0]), idx])


# IDX raster files


def _read_idx(path, expected_magic: int, limit: int | None):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if len(raw) - header < count:
        raise FormatError(f"{path}: truncated payload ({len(raw) - header} of {count} bytes)")
    arr = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)
    if limit is not None:
        arr = arr[:limit]
    return arr


def load_idx_images(path, limit: int | None = None, labels_path=None) -> Dataset:
    """Unsigned-byte IDX image file as rows of pixels scaled to [0, 1]."""
    arr = _read_idx(path, IDX_UBYTE_IMAGES, limit)
    x = arr.reshape(arr.shape[0], -1).astype(np.float64) / 255.0
    y = None
    if labels_path is not None:
        y = _read_idx(labels_path, IDX_UBYTE_LABELS, limit).astype(np.int64)
        if y.shape[0] != x.shape[0]:
            raise FormatError(f"{y.shape[0]} labels for {x.shape[0]} images")
    meta = ManifoldMeta("idx_images", {"rows": int(arr.shape[1]), "cols": int(arr.shape[2])})
    return Dataset(x, y, meta, "idx")


def write_idx_images(path, images) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise DimensionError(f"expected [n, rows, cols], got {images.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_UBYTE_IMAGES))
        fh.write(struct.pack(">3I", *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_UBYTE_LABELS, labels.shape[0]))
        fh.write(labels.tobytes())
