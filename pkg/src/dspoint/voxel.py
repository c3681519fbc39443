"""Dense voxel grids: averaging point features into R^3 cells and projecting back.

Flat voxel index of cell (a, b, c) is ``(a * R + b) * R + c`` (x-major, then y,
then z). Both :func:`voxel_centers` and :func:`voxel_index` use this ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class CoordinateRangeError(ValueError):
    pass


@dataclass
class VoxelGrid:
    resolution: int
    features: Tensor        # (..., R^3, C)
    counts: np.ndarray      # (..., R^3)
    point_to_voxel: np.ndarray  # (..., N)
    centers: np.ndarray     # (R^3, 3)

    @property
    def num_voxels(self) -> int:
        return self.resolution ** 3


def voxel_centers(resolution: int) -> np.ndarray:
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    r = resolution
    a, b, c = np.meshgrid(np.arange(r), np.arange(r), np.arange(r), indexing="ij")
    cells = np.stack([a.ravel(), b.ravel(), c.ravel()], axis=1)
    return (cells + 0.5) / r


def voxel_index(coords: np.ndarray, resolution: int) -> np.ndarray:
    """Flat voxel index of every point; coords must lie in [0, 1)."""
    coords = np.asarray(coords)
    if coords.size and (coords.min() < 0 or coords.max() >= 1):
        raise CoordinateRangeError(
            "coordinates outside [0, 1); re-normalize with normalize_unit_cube before voxelizing")
    r = resolution
    cell = np.floor(coords * r).astype(np.int64)
    cell = np.minimum(cell, r - 1)
    return (cell[..., 0] * r + cell[..., 1]) * r + cell[..., 2]


def voxelize(coords: np.ndarray, feats: Tensor, resolution: int) -> VoxelGrid:
    """Average point features into a dense grid.

    ``coords`` is (N, 3) or (B, N, 3); ``feats`` is the matching (..., N, C).
    """
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    if not isinstance(feats, Tensor):
        feats = Tensor(feats)
    if coords.shape[:-1] != feats.shape[:-1] or coords.shape[-1] != 3:
        raise ad.ShapeError("voxelize", coords.shape, feats.shape)
    idx = voxel_index(coords, resolution)
    means, counts = ad.scatter_mean(feats, idx, resolution ** 3)
    return VoxelGrid(resolution, means, counts, idx, voxel_centers(resolution))


def devoxelize(grid: VoxelGrid, n_points: int | None = None) -> Tensor:
    """Assign each point the feature of the voxel it fell into."""
    if n_points is not None and grid.point_to_voxel.shape[-1] != n_points:
        raise ad.ShapeError("devoxelize", grid.point_to_voxel.shape, (n_points,))
    return ad.gather(grid.features, grid.point_to_voxel)


def point_centers(grid: VoxelGrid) -> np.ndarray:
    """Center of the containing voxel for every point, shape (..., N, 3)."""
    return grid.centers[grid.point_to_voxel]
