"""Dual-scale blocks, the classification network and its checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import VoxelAttention
from .autodiff import Tensor
from .data import normalize_coords
from .fusion import HFFusion, HfConfig, apply_placement, fuse
from .local import DynConv, MLPBaseline, knn
from .nn import BatchNorm, Linear, Module
from .voxel import point_centers, voxelize

LOCAL_OPS = ("dynconv", "mlp")


class ConfigError(ValueError):
    """One or more configuration fields are invalid."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration: " + "; ".join(problems))


def _split_sizes(channels: int, local_ratio: float) -> tuple[int, int]:
    c_local = local_ratio * channels
    if not 0 < local_ratio < 1 or abs(c_local - round(c_local)) > 1e-9:
        raise ValueError(f"local ratio {local_ratio} does not split {channels} channels integrally")
    c_local = int(round(c_local))
    if c_local in (0, channels):
        raise ValueError(f"local ratio {local_ratio} leaves an empty branch for {channels} channels")
    return c_local, channels - c_local


def split_channels(f: Tensor, local_ratio: float) -> tuple[Tensor, Tensor]:
    """First ``local_ratio * C`` channels go local, the rest global."""
    c_local, c_global = _split_sizes(f.shape[-1], local_ratio)
    local, glob = ad.split(f, [c_local, c_global], axis=-1)
    return local, glob


@dataclass(frozen=True)
class BlockConfig:
    channels: int = 64
    resolution: int = 8
    k: int = 8
    local_ratio: float = 0.75
    heads: int = 4
    hf: HfConfig = field(default_factory=HfConfig)

    def __post_init__(self):
        c_local, c_global = _split_sizes(self.channels, self.local_ratio)
        if self.resolution < 1:
            raise ValueError(f"resolution must be >= 1, got {self.resolution}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.heads < 1 or c_global % self.heads:
            raise ValueError(f"heads={self.heads} must divide the {c_global} global channels")

    @property
    def local_channels(self) -> int:
        return _split_sizes(self.channels, self.local_ratio)[0]

    @property
    def global_channels(self) -> int:
        return _split_sizes(self.channels, self.local_ratio)[1]


@dataclass
class ModelConfig:
    """Network hyperparameters. Defaults are the published classification setting."""

    channels: tuple[int, ...] = (64, 64, 128)
    resolutions: tuple[int, ...] = (8, 6, 4)
    k: int = 8
    local_ratio: float = 0.75
    heads: int = 4
    hf_levels: int = 10
    hf_local: str = "back"
    hf_global: str = "back"
    n_points: int = 1024
    num_classes: int = 40
    kernel_hidden: int = 16
    head_dims: tuple[int, ...] = (1024, 512)
    local_op: str = "dynconv"
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.resolutions = tuple(int(r) for r in self.resolutions)
        self.head_dims = tuple(int(d) for d in self.head_dims)

    def validate(self) -> "ModelConfig":
        problems = []
        if len(self.channels) != len(self.resolutions) or not self.channels:
            problems.append("channels and resolutions must be non-empty and the same length")
        if self.local_op not in LOCAL_OPS:
            problems.append(f"local_op must be one of {LOCAL_OPS}")
        if self.dtype not in ("float32", "float64"):
            problems.append("dtype must be float32 or float64")
        if self.num_classes < 1:
            problems.append("num_classes must be >= 1")
        if self.n_points < 1:
            problems.append("n_points must be >= 1")
        elif self.k < 1 or self.k > self.n_points:
            problems.append(f"k={self.k} must lie in [1, n_points={self.n_points}]")
        if self.hf_levels < 1:
            problems.append("hf_levels must be >= 1")
        if self.kernel_hidden < 1:
            problems.append("kernel_hidden must be >= 1")
        if len(self.head_dims) != 2:
            problems.append("head_dims must list two hidden widths")
        try:
            self.block_configs()
        except ValueError as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def hf(self) -> HfConfig:
        return HfConfig(self.hf_levels, self.hf_local, self.hf_global)

    def block_configs(self) -> list[BlockConfig]:
        return [BlockConfig(c, r, self.k, self.local_ratio, self.heads, self.hf)
                for c, r in zip(self.channels, self.resolutions)]

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("channels", "resolutions", "head_dims"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown model field {name!r}" for name in unknown])
        return cls(**d)


class DualScaleBlock(Module):
    """Channel split into a point-wise convolution branch and a voxel attention branch.

    Both branches keep an internal residual. The local branch applies
    batch norm and ReLU after the convolution. Branch outputs are fused back to
    ``C`` channels and the (projected) block input is added.
    """

    def __init__(self, in_channels: int, cfg: BlockConfig, rng: np.random.Generator,
                 kernel_hidden: int = 16, local_op: str = "dynconv", dtype=np.float64):
        self.cfg = cfg
        c, cl, cg = cfg.channels, cfg.local_channels, cfg.global_channels
        self.residual_proj = Linear(in_channels, c, rng, dtype) if in_channels != c else None
        if local_op == "dynconv":
            self.local_op = DynConv(cl, rng, kernel_hidden, dtype)
        else:
            self.local_op = MLPBaseline(cl, rng, dtype=dtype)
        self.local_norm = BatchNorm(cl, dtype)
        self.attention = VoxelAttention(cg, cfg.heads, rng, dtype)
        self.fusion = HFFusion(cl, cg, c, cfg.hf.levels, rng, dtype)

    def __call__(self, coords: np.ndarray, f: Tensor, neighbors: np.ndarray) -> Tensor:
        return dual_scale_block(coords, f, self.cfg, self, neighbors)


def dual_scale_block(coords: np.ndarray, f: Tensor, cfg: BlockConfig, params: DualScaleBlock,
                     neighbors: np.ndarray | None = None) -> Tensor:
    if neighbors is None:
        neighbors = knn(coords, cfg.k)
    dtype = f.dtype
    x = params.residual_proj(f) if params.residual_proj is not None else f
    f_local, f_global = split_channels(x, cfg.local_ratio)
    wiring = apply_placement(cfg.hf)

    grid = voxelize(coords, f_global, cfg.resolution)
    centers_pp = point_centers(grid)

    if wiring.local_front:
        f_local = ad.add(f_local, params.fusion.voxel_term(centers_pp, dtype))
    conv = params.local_op(f_local, coords, neighbors)
    h_local = ad.add(ad.relu(params.local_norm(conv)), f_local)

    g = grid.features
    if wiring.global_front:
        injected, _ = ad.scatter_mean(params.fusion.point_term(coords, dtype), grid.point_to_voxel,
                                      grid.num_voxels)
        g = ad.add(g, injected)
    g = params.attention(g, grid.centers)
    h_global = ad.gather(g, grid.point_to_voxel)

    return ad.add(fuse(h_local, h_global, coords, centers_pp, params.fusion, cfg.hf), x)


class DSPointNet(Module):
    """Coordinate stem, stacked dual-scale blocks and a max-pooled classification head."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        blocks = config.block_configs()
        self.stem = Linear(3, blocks[0].channels, rng, dtype)
        self.blocks = []
        prev = blocks[0].channels
        for bcfg in blocks:
            self.blocks.append(DualScaleBlock(prev, bcfg, rng, config.kernel_hidden, config.local_op, dtype))
            prev = bcfg.channels
        h1, h2 = config.head_dims
        self.head_fc1 = Linear(prev, h1, rng, dtype)
        self.head_bn1 = BatchNorm(h1, dtype)
        self.head_fc2 = Linear(h1, h2, rng, dtype)
        self.head_bn2 = BatchNorm(h2, dtype)
        self.head_fc3 = Linear(h2, config.num_classes, rng, dtype)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def prepare_coords(self, coords) -> np.ndarray:
        """Validate shape and re-normalize any cloud that left the unit cube."""
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[-1] != 3:
            raise ad.ShapeError("forward (expected B x N x 3 coordinates)", coords.shape)
        if coords.shape[1] != self.config.n_points:
            raise ValueError(f"expected {self.config.n_points} points per cloud, got {coords.shape[1]}")
        out = coords.copy()
        outside = (coords < 0).any(axis=(1, 2)) | (coords >= 1).any(axis=(1, 2))
        if outside.any():
            out[outside] = normalize_coords(coords[outside])
        return out

    def features(self, coords) -> Tensor:
        """Per-point features after the last block, shape (B, N, C)."""
        coords = self.prepare_coords(coords)
        cache: dict[int, np.ndarray] = {}
        f = self.stem(Tensor(coords.astype(self.dtype)))
        for block in self.blocks:
            k = block.cfg.k
            if k not in cache:
                cache[k] = knn(coords, k)
            f = block(coords, f, cache[k])
        return f

    def pool(self, f: Tensor) -> Tensor:
        h = ad.relu(self.head_bn1(self.head_fc1(f)))
        pooled, _ = ad.max_reduce(h, axis=-2)
        return pooled

    def embed(self, coords) -> Tensor:
        """Max-pooled global representation, shape (B, head_dims[0])."""
        return self.pool(self.features(coords))

    def classify(self, pooled: Tensor) -> Tensor:
        return self.head_fc3(ad.relu(self.head_bn2(self.head_fc2(pooled))))

    def __call__(self, coords) -> Tensor:
        """Logits for a (B, N, 3) batch, or (num_classes,) for a single (N, 3) cloud."""
        coords = np.asarray(coords)
        single = coords.ndim == 2
        logits = self.classify(self.embed(coords[None] if single else coords))
        return ad.reshape(logits, (logits.shape[-1],)) if single else logits


def forward(coords, model: DSPointNet) -> Tensor:
    return model(coords)


def param_count(model: Module) -> int:
    return model.param_count()


# ---------------------------------------------------------------- checkpoints

MAGIC = b"DSPTCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, model: DSPointNet, metadata: dict | None = None) -> None:
    """Little-endian binary: magic, u32 version, u64 header length, JSON header, payloads.

    Payloads are stored in the model's dtype ("<f4" for float32 models, "<f8" for
    float64 ones) so a round trip is bitwise exact.
    """
    state = model.state_dict()
    code = "<f4" if model.dtype == np.float32 else "<f8"
    entries, blobs, offset = [], [], 0
    for name, arr in state.items():
        blob = np.ascontiguousarray(arr, dtype=code).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code,
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": model.config.to_dict(), "tensors": entries,
                         "metadata": metadata or {}}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


class CheckpointError(ValueError):
    pass


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Header dict and raw name -> array state."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(raw[pos:pos + hlen])
    base = pos + hlen
    state = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=start)
        state[e["name"]] = arr.reshape(e["shape"]).copy()
    return header, state


def load_checkpoint(path: str | Path) -> tuple[DSPointNet, dict]:
    """Rebuild the model from the stored config and load its state; returns (model, metadata)."""
    header, state = read_checkpoint(path)
    model = DSPointNet(ModelConfig.from_dict(header["config"]))
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    model.eval()
    return model, header.get("metadata", {})
