"""High-frequency coordinate encoding and point/voxel stream fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, Module

PLACEMENTS = ("front", "back", "none")


@dataclass(frozen=True)
class HfConfig:
    levels: int = 10
    placement_local: str = "back"
    placement_global: str = "back"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        for side in (self.placement_local, self.placement_global):
            if side not in PLACEMENTS:
                raise ValueError(f"placement must be one of {PLACEMENTS}, got {side!r}")


def hf_dim(levels: int) -> int:
    return 3 * (2 * levels + 1)


def hf_encode(coords, levels: int) -> Tensor:
    """Map each coordinate c to (c, sin(2^0 pi c), cos(2^0 pi c), ..., sin(2^(L-1) pi c), cos(...)).

    Channels are grouped per axis: all of x's encodings, then y's, then z's.
    ``coords`` may be an array or a Tensor of shape (..., 3); gradients flow
    through when it is a Tensor.
    """
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    c = coords if isinstance(coords, Tensor) else Tensor(coords)
    lead = c.shape[:-1]
    # powers of two scale exactly; pi is applied inside sinpi/cospi
    freqs = Tensor((2.0 ** np.arange(levels))[None, :].astype(c.dtype))
    col = ad.reshape(c, (*lead, 3, 1))
    phase = ad.matmul(col, freqs)                               # (..., 3, L), in half-turns
    pairs = ad.concat([ad.reshape(ad.sinpi(phase), (*lead, 3, levels, 1)),
                       ad.reshape(ad.cospi(phase), (*lead, 3, levels, 1))], axis=-1)
    trig = ad.reshape(pairs, (*lead, 3, 2 * levels))
    return ad.reshape(ad.concat([col, trig], axis=-1), (*lead, hf_dim(levels)))


class Wiring(NamedTuple):
    local_front: bool
    local_back: bool
    global_front: bool
    global_back: bool


def apply_placement(cfg: HfConfig) -> Wiring:
    """Where each branch receives its coordinate injection."""
    return Wiring(cfg.placement_local == "front", cfg.placement_local == "back",
                  cfg.placement_global == "front", cfg.placement_global == "back")


class HFFusion(Module):
    """Projections for both coordinate injections and the final channel fusion."""

    def __init__(self, local_channels: int, global_channels: int, out_channels: int, levels: int,
                 rng: np.random.Generator, dtype=np.float64):
        if local_channels + global_channels != out_channels:
            raise ValueError("local + global channels must equal the output channels")
        self.levels = levels
        self.linear_v = Linear(hf_dim(levels), local_channels, rng, dtype)
        self.linear_p = Linear(hf_dim(levels), global_channels, rng, dtype)
        self.final_fuse = Linear(local_channels + global_channels, out_channels, rng, dtype)

    def voxel_term(self, voxel_centers_per_point: np.ndarray, dtype) -> Tensor:
        """Encoded voxel coordinates projected into the local stream."""
        return self.linear_v(hf_encode(voxel_centers_per_point.astype(dtype), self.levels))

    def point_term(self, point_coords: np.ndarray, dtype) -> Tensor:
        """Encoded point coordinates projected into the global stream."""
        return self.linear_p(hf_encode(point_coords.astype(dtype), self.levels))

    def merge(self, h_local: Tensor, h_global: Tensor) -> Tensor:
        return self.final_fuse(ad.concat([h_local, h_global], axis=-1))


def fuse(f_local: Tensor, f_global: Tensor, point_coords: np.ndarray,
         voxel_centers_per_point: np.ndarray, params: HFFusion,
         cfg: HfConfig | None = None) -> Tensor:
    """Add the encoded coordinates of the opposite stream to each branch, then merge.

    Only the "back" placements inject here; "front" injections happen before the
    branch operators inside the block, and "none" skips the branch.
    """
    if f_local.shape[:-1] != f_global.shape[:-1]:
        raise ad.ShapeError("fuse", f_local.shape, f_global.shape)
    if point_coords.shape[:-1] != f_local.shape[:-1] or voxel_centers_per_point.shape != point_coords.shape:
        raise ad.ShapeError("fuse", f_local.shape, point_coords.shape, voxel_centers_per_point.shape)
    wiring = apply_placement(cfg or HfConfig(levels=params.levels))
    h_local = f_local
    if wiring.local_back:
        h_local = ad.add(f_local, params.voxel_term(voxel_centers_per_point, f_local.dtype))
    h_global = f_global
    if wiring.global_back:
        h_global = ad.add(f_global, params.point_term(point_coords, f_global.dtype))
    return params.merge(h_local, h_global)
