"""Parameter containers and the affine / normalization layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor


class Module:
    """Holds parameters (Tensors), buffers (BatchNormState) and child modules.

    Names are discovered from instance attributes in definition order, so the
    parameter ordering is a pure function of the constructor.
    """

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if isinstance(val, (Tensor, Module, BatchNormState)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self._children():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for key, val in self._children():
            if isinstance(val, BatchNormState):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        """Flat name -> array map of parameters and running statistics (copies)."""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[f"{name}.running_mean"] = buf.running_mean.copy()
            state[f"{name}.running_var"] = buf.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in expected.items():
            if state[name].shape != arr.shape:
                raise ValueError(f"{name}: expected shape {arr.shape}, got {state[name].shape}")
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in self.named_buffers():
            buf.running_mean = np.array(state[f"{name}.running_mean"], dtype=buf.running_mean.dtype)
            buf.running_var = np.array(state[f"{name}.running_var"], dtype=buf.running_var.dtype)

    def param_count(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()], dtype=np.int64))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, val in self._children():
            if isinstance(val, Module):
                val.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    """Affine map ``x @ W + b`` with fan-in scaled uniform init and zero bias."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float64, bias: bool = True):
        bound = 1.0 / np.sqrt(in_features)
        self.weight = _param(rng.uniform(-bound, bound, size=(in_features, out_features)), dtype)
        self.bias = _param(np.zeros(out_features), dtype) if bias else None

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return ad.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, channels: int, dtype=np.float64):
        self.weight = _param(np.ones(channels), dtype)
        self.bias = _param(np.zeros(channels), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float64):
        self.weight = _param(np.ones(channels), dtype)
        self.bias = _param(np.zeros(channels), dtype)
        self.state = BatchNormState.create(channels, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.batch_norm(x, self.weight, self.bias, self.state, self.training)
