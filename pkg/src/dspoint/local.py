"""Point-scale local encoding: exact kNN and coordinate-generated dynamic convolution."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, Module


def knn(coords: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest neighbours by brute force.

    Rows are ordered by (squared distance, point index); every point is its own
    first neighbour. Accepts (N, 3) or batched (B, N, 3) coordinates.
    """
    coords = np.asarray(coords)
    n = coords.shape[-2]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if coords.ndim == 3:
        return np.stack([knn(c, k) for c in coords])
    diff = coords[:, None, :] - coords[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    # stable sort keeps lower index first among equal distances
    return np.argsort(d2, axis=-1, kind="stable")[:, :k]


class DynConv(Module):
    """Neighbourhood aggregation with per-neighbour kernels predicted from offsets.

    ``out_i = OutProj(sum_j W(p_j - p_i) * f_j)`` over the kNN of point i, where
    W is a two-layer ReLU network 3 -> hidden -> C.
    """

    def __init__(self, channels: int, rng: np.random.Generator, hidden: int = 16, dtype=np.float64):
        self.kernel1 = Linear(3, hidden, rng, dtype)
        self.kernel2 = Linear(hidden, channels, rng, dtype)
        self.out_proj = Linear(channels, channels, rng, dtype)

    def kernels(self, offsets: Tensor) -> Tensor:
        return self.kernel2(ad.relu(self.kernel1(offsets)))

    def __call__(self, feats: Tensor, coords: np.ndarray, neighbors: np.ndarray) -> Tensor:
        return dyn_conv(feats, coords, neighbors, self)


def dyn_conv(feats: Tensor, coords: np.ndarray, neighbors: np.ndarray, params: DynConv) -> Tensor:
    if feats.shape[:-1] != coords.shape[:-1] or neighbors.shape[:-1] != coords.shape[:-1]:
        raise ad.ShapeError("dyn_conv", feats.shape, coords.shape, neighbors.shape)
    if feats.shape[-1] != params.out_proj.in_features:
        raise ad.ShapeError("dyn_conv", feats.shape, params.out_proj.weight.shape)
    if coords.ndim == 2:
        nbr_coords = coords[neighbors]
    else:
        nbr_coords = coords[np.arange(len(coords))[:, None, None], neighbors]
    offsets = Tensor((nbr_coords - coords[..., None, :]).astype(feats.dtype))
    weights = params.kernels(offsets)             # (..., N, k, C)
    nbr_feats = ad.gather(feats, neighbors)       # (..., N, k, C)
    agg = ad.sum(ad.mul(weights, nbr_feats), axis=-2)
    return params.out_proj(agg)


class MLPBaseline(Module):
    """Shared per-point affine + ReLU + affine; ignores coordinates and neighbours."""

    def __init__(self, channels: int, rng: np.random.Generator, hidden: int | None = None, dtype=np.float64):
        hidden = hidden or channels
        self.fc1 = Linear(channels, hidden, rng, dtype)
        self.fc2 = Linear(hidden, channels, rng, dtype)

    def __call__(self, feats: Tensor, coords=None, neighbors=None) -> Tensor:
        return mlp_baseline(feats, self)


def mlp_baseline(feats: Tensor, params: MLPBaseline) -> Tensor:
    return params.fc2(ad.relu(params.fc1(feats)))
