"""End-to-end verification harnesses shared by the CLI and the test-suite."""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .model import DSPointNet, ModelConfig
from .train import cross_entropy

SIZES = {
    # smallest configuration; 2 global channels per block force 2 heads at most
    "tiny": dict(channels=(8, 8, 16), resolutions=(2, 2, 2), k=3, hf_levels=2, heads=2,
                 n_points=32, num_classes=3, head_dims=(32, 16)),
    "small": dict(channels=(16, 16, 32), resolutions=(4, 3, 2), k=4, hf_levels=4, heads=4,
                  n_points=32, num_classes=5),
}


def size_config(size: str, **overrides) -> ModelConfig:
    if size not in SIZES:
        raise ValueError(f"unknown size {size!r}; choose from {sorted(SIZES)}")
    return ModelConfig(**{**SIZES[size], "dtype": "float64", **overrides})


def generic_clouds(n_clouds: int, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Random clouds strictly inside the unit cube (no ties or boundary points in practice)."""
    return rng.uniform(0.01, 0.99, size=(n_clouds, n_points, 3))


def sample_parameters(model: DSPointNet, n_samples: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """One element from every parameter tensor, then uniform draws up to ``n_samples``."""
    params = model.parameters()
    picks = {(i, int(rng.integers(p.data.size))) for i, p in enumerate(params)}
    sizes = np.array([p.data.size for p in params])
    owner = np.repeat(np.arange(len(params)), sizes)
    start = np.r_[0, np.cumsum(sizes)[:-1]]
    while len(picks) < n_samples:
        flat = int(rng.integers(sizes.sum()))
        t = int(owner[flat])
        picks.add((t, flat - int(start[t])))
    return sorted(picks)


def end_to_end_grad_check(config: ModelConfig, n_samples: int = 200, batch: int = 3, seed: int = 0,
                          step: float = 1e-5, tolerance: float = 1e-3) -> ad.GradCheckReport:
    """Finite-difference check of the full classification loss w.r.t. sampled parameters."""
    rng = np.random.default_rng(seed)
    model = DSPointNet(config).train()
    coords = generic_clouds(batch, config.n_points, rng)
    labels = rng.integers(0, config.num_classes, size=batch)
    samples = sample_parameters(model, n_samples, rng)
    return ad.grad_check_many(lambda: cross_entropy(model(coords), labels), model.parameters(),
                              samples, step=step, tolerance=tolerance)


def benchmark(config: ModelConfig, repeat: int = 5, seed: int = 0) -> dict:
    """Eval-mode forward latency for one cloud; the first call is treated as warm-up."""
    model = DSPointNet(config).eval()
    coords = generic_clouds(1, config.n_points, np.random.default_rng(seed))
    model(coords)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        model(coords)
        times.append(time.perf_counter() - t0)
    times = np.array(times) * 1000.0
    return {"n_points": config.n_points, "repeat": repeat, "mean_ms": float(times.mean()),
            "std_ms": float(times.std()), "params": model.param_count()}
