"""Input validation for point-cloud batches."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .data import PointCloud, normalize_coords


def _as_cloud(item, i: int) -> np.ndarray:
    arr = item.coords if isinstance(item, PointCloud) else np.asarray(item, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or len(arr) == 0:
        raise ValueError(f"cloud {i}: expected an (N, 3) array with N >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"cloud {i}: contains NaN or infinite coordinates")
    return arr


def check_point_clouds(X, n_points: int | None = None, normalize: bool = True) -> np.ndarray:
    """Coerce ``X`` into a float64 (M, N, 3) array.

    ``X`` may be a 3-D array, or a sequence of (N_i, 3) arrays / PointClouds of
    varying length. With ``n_points`` each cloud is cut to its first points
    (cycling when shorter); with ``normalize`` each is mapped into the unit cube.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        clouds = [_as_cloud(c, i) for i, c in enumerate(X)]
    elif isinstance(X, (Sequence, np.ndarray)) and not isinstance(X, (str, bytes)):
        if len(X) == 0:
            raise ValueError("no point clouds given")
        clouds = [_as_cloud(c, i) for i, c in enumerate(X)]
    else:
        raise TypeError(f"expected a sequence of point clouds, got {type(X).__name__}")
    if not clouds:
        raise ValueError("no point clouds given")
    if n_points is not None:
        clouds = [c[np.arange(n_points) % len(c)] for c in clouds]
    elif len({len(c) for c in clouds}) > 1:
        raise ValueError("clouds differ in size; pass n_points to resample them")
    out = np.stack(clouds)
    return normalize_coords(out) if normalize else out


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"expected {n_samples} labels in a 1-D array, got shape {y.shape}")
    return y
