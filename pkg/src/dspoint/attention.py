"""Voxel-scale global encoding: positional embedding, layer norm, multi-head attention."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import LayerNorm, Linear, Module


class VoxelAttention(Module):
    """Pre-norm multi-head self-attention across every voxel of a dense grid."""

    def __init__(self, channels: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        if heads < 1 or channels % heads:
            raise ValueError(f"heads={heads} must divide channels={channels}")
        self.heads = heads
        self.pos_embed = Linear(3, channels, rng, dtype)
        self.norm = LayerNorm(channels, dtype)
        self.query = Linear(channels, channels, rng, dtype)
        self.key = Linear(channels, channels, rng, dtype)
        self.value = Linear(channels, channels, rng, dtype)
        self.out_proj = Linear(channels, channels, rng, dtype)

    @property
    def channels(self) -> int:
        return self.query.in_features

    def __call__(self, feats: Tensor, centers: np.ndarray) -> Tensor:
        return voxel_attention(feats, centers, self)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, v, c = x.shape
    return ad.swapaxes(ad.reshape(x, (*lead, v, heads, c // heads)), -2, -3)


def _attend(feats: Tensor, centers: np.ndarray, params: VoxelAttention) -> tuple[Tensor, Tensor]:
    if feats.shape[-2] != centers.shape[0] or feats.shape[-1] != params.channels:
        raise ad.ShapeError("voxel_attention", feats.shape, centers.shape)
    h = params.heads
    x = ad.add(feats, params.pos_embed(Tensor(centers.astype(feats.dtype))))
    x = params.norm(x)
    head_dim = params.channels // h
    q = _split_heads(ad.scale(params.query(x), 1.0 / np.sqrt(head_dim)), h)
    k = _split_heads(params.key(x), h)
    v = _split_heads(params.value(x), h)
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2))
    affinity = ad.softmax(scores)                     # (..., H, V, V)
    mixed = ad.swapaxes(ad.matmul(affinity, v), -2, -3)  # (..., V, H, d)
    mixed = ad.reshape(mixed, feats.shape)
    return affinity, params.out_proj(mixed)


def voxel_attention(feats: Tensor, centers: np.ndarray, params: VoxelAttention) -> Tensor:
    """``feats + OutProj(MHA(LayerNorm(feats + PosEmbed(centers))))``."""
    _, out = _attend(feats, centers, params)
    return ad.add(feats, out)


def extract_affinity(feats: Tensor, centers: np.ndarray, params: VoxelAttention) -> np.ndarray:
    """Softmax affinity per head, shape (..., H, V, V)."""
    affinity, _ = _attend(feats, centers, params)
    return affinity.data
