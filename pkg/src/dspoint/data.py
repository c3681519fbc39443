"""Point-cloud containers, XYZ ingestion, preprocessing and the synthetic dataset."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

EPS = 1e-6
SYNTH_CLASSES = ("sphere", "cube", "cylinder", "cone", "torus")


class PointCloudFormatError(ValueError):
    pass


@dataclass
class PointCloud:
    coords: np.ndarray
    label: int | None = None
    name: str | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or len(self.coords) < 1:
            raise ValueError(f"coords must be N x 3 with N >= 1, got {self.coords.shape}")

    def __len__(self) -> int:
        return len(self.coords)


@dataclass
class AugmentConfig:
    dropout: bool = True
    translate: bool = True
    shuffle: bool = True
    min_keep: float = 0.5
    max_shift: float = 0.2


@dataclass
class Dataset:
    items: list[PointCloud]
    class_names: list[str]
    split: str = "train"

    def __post_init__(self):
        k = len(self.class_names)
        for pc in self.items:
            if pc.label is None or not 0 <= pc.label < k:
                raise ValueError(f"item {pc.name!r} has label {pc.label} outside [0, {k})")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([pc.label for pc in self.items], dtype=np.int64)

    def stack(self, n_points: int | None = None) -> np.ndarray:
        """Coordinates as a (len, N, 3) array, sampling each cloud to ``n_points``."""
        clouds = self.items if n_points is None else [sample_first_k(pc, n_points) for pc in self.items]
        return np.stack([pc.coords for pc in clouds])


def load_xyz(path: str | Path) -> PointCloud:
    """Read an ASCII "x y z" file; extra trailing fields on a line are ignored."""
    path = Path(path)
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                rows.append([float(v) for v in parts[:3]])
                if len(parts) < 3:
                    raise ValueError
            except ValueError:
                raise PointCloudFormatError(f"{path}:{lineno}: cannot parse point from {line.strip()!r}") from None
    if not rows:
        raise PointCloudFormatError(f"{path}: no points")
    return PointCloud(np.array(rows), name=path.stem)


def save_xyz(pc: PointCloud, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # repr-precision text so reloading is exact
    path.write_text("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pc.coords.tolist()))


def normalize_coords(coords: np.ndarray) -> np.ndarray:
    """Per-axis min-max map into [0, 1 - EPS]; degenerate axes map to 0.5."""
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise ValueError("non-finite coordinates")
    lo = coords.min(axis=-2, keepdims=True)
    span = coords.max(axis=-2, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    out = (coords - lo) / safe * (1.0 - EPS)
    return np.where(span > 0, out, 0.5)


def normalize_unit_cube(pc: PointCloud) -> PointCloud:
    return replace(pc, coords=normalize_coords(pc.coords))


def sample_first_k(pc: PointCloud, k: int) -> PointCloud:
    """Keep the first ``k`` points, cycling through the cloud when it is shorter."""
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    idx = np.arange(k) % len(pc)
    return replace(pc, coords=pc.coords[idx])


def augment(pc: PointCloud, seed, cfg: AugmentConfig | None = None) -> PointCloud:
    """Random point dropout, translation and shuffling, all driven by ``seed``.

    Dropped points are overwritten with point 0 so N never changes.
    """
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(seed)
    coords = pc.coords.copy()
    n = len(coords)
    if cfg.dropout:
        keep = rng.uniform(cfg.min_keep, 1.0)
        dropped = rng.random(n) < 1.0 - keep
        coords[dropped] = coords[0]
    if cfg.translate:
        coords = coords + rng.uniform(-cfg.max_shift, cfg.max_shift, size=3)
    if cfg.shuffle:
        coords = coords[rng.permutation(n)]
    return replace(pc, coords=coords)


# ---------------------------------------------------------------- synthetic shapes

def _sample_surface(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "sphere":
        v = rng.normal(size=(n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "cube":
        face = rng.integers(0, 6, size=n)
        pts = rng.uniform(-1, 1, size=(n, 3))
        axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
        pts[np.arange(n), axis] = sign
        return pts
    if kind == "cylinder":
        # radius 1, height 2; lateral area 4*pi, caps 2*pi
        part = rng.choice(3, size=n, p=[2 / 3, 1 / 6, 1 / 6])
        theta = rng.uniform(0, 2 * np.pi, size=n)
        r = np.where(part == 0, 1.0, np.sqrt(rng.uniform(size=n)))
        z = np.where(part == 0, rng.uniform(-1, 1, size=n), np.where(part == 1, -1.0, 1.0))
        return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    if kind == "cone":
        # apex at z=1, unit base disc at z=-1; lateral area pi*sqrt(5), base pi
        slant = math.sqrt(5)
        on_side = rng.random(n) < slant / (slant + 1)
        theta = rng.uniform(0, 2 * np.pi, size=n)
        u = np.sqrt(rng.uniform(size=n))
        z = np.where(on_side, 1 - 2 * u, -1.0)
        r = u
        return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    if kind == "torus":
        big, small = 1.0, 0.35
        # rejection sampling for uniform area density
        out = np.empty((0, 3))
        while len(out) < n:
            m = 2 * (n - len(out)) + 16
            u = rng.uniform(0, 2 * np.pi, size=m)
            v = rng.uniform(0, 2 * np.pi, size=m)
            ok = rng.uniform(size=m) < (big + small * np.cos(v)) / (big + small)
            u, v = u[ok], v[ok]
            ring = big + small * np.cos(v)
            out = np.vstack([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)])
        return out[:n]
    raise ValueError(f"unknown shape {kind!r}")


def synth_cloud(kind: str, n_points: int, rng: np.random.Generator, noise: float = 0.02,
                normalize: bool = True) -> np.ndarray:
    pts = _sample_surface(kind, n_points, rng)
    pts = pts + rng.normal(scale=noise, size=pts.shape)
    theta = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    pts = pts @ rot.T
    return normalize_coords(pts) if normalize else pts


def synth_dataset(seed: int, per_class: int, points_per_cloud: int = 1024) -> tuple[Dataset, Dataset]:
    """Five primitive surface classes, 80/20 train/test split per class."""
    if per_class < 2:
        raise ValueError("per_class must be at least 2")
    rng = np.random.default_rng(seed)
    n_train = int(round(per_class * 0.8))
    n_train = min(max(n_train, 1), per_class - 1)
    train, test = [], []
    for label, kind in enumerate(SYNTH_CLASSES):
        for i in range(per_class):
            pc = PointCloud(synth_cloud(kind, points_per_cloud, rng), label=label, name=f"{kind}_{i:04d}")
            (train if i < n_train else test).append(pc)
    names = list(SYNTH_CLASSES)
    return Dataset(train, names, "train"), Dataset(test, names, "test")


# ---------------------------------------------------------------- directory layout

def write_dataset(root: str | Path, *datasets: Dataset) -> None:
    """Write ``<root>/<class_name>/<split>/<item>.xyz``."""
    root = Path(root)
    for ds in datasets:
        for pc in ds.items:
            save_xyz(pc, root / ds.class_names[pc.label] / ds.split / f"{pc.name}.xyz")


def load_dataset(root: str | Path, split: str, class_names: list[str] | None = None) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if class_names is None:
        class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not class_names:
        raise FileNotFoundError(f"no class directories under {root}")
    items = []
    for label, cname in enumerate(class_names):
        for path in sorted((root / cname / split).glob("*.xyz")):
            pc = load_xyz(path)
            items.append(PointCloud(pc.coords, label=label, name=f"{cname}/{path.stem}"))
    return Dataset(items, list(class_names), split)
