"""Minimal dense-tensor engine with reverse-mode differentiation.

Every tensor wraps a NumPy array. Ops record their parents and a backward
closure; :func:`backward` walks the graph in reverse topological order and
accumulates gradients into leaves that have ``requires_grad`` set.

Broadcasting is restricted to leading-axis expansion: the smaller operand's
shape must equal the trailing axes of the larger one. Anything else needs an
explicit reshape.

Reductions that scatter rows (``gather`` backward, ``scatter_mean``) use the
unbuffered ``np.add.at``, which accumulates strictly in input-row order, so
results are bitwise reproducible and equal to a naive left-to-right loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Operand shapes do not conform."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        listed = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class Tensor:
    """Dense array node in a differentiation graph.

    Parameters
    ----------
    data : array_like
        Values. Floating arrays keep their dtype; anything else becomes float64.
    requires_grad : bool
        Whether ``backward`` should accumulate into ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other, self), -1.0))

    def __rsub__(self, other):
        return add(_lift(other, self), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    ``None``) per parent, in order.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _check_leading(op: str, a: Tensor, b: Tensor) -> None:
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if big.shape[big.ndim - small.ndim:] != small.shape:
        raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead else g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_leading("add", a, b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_leading("mul", a, b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)  # a numpy float64 scalar would promote float32 data
    return make_op(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,))


def sin(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(np.sin(xd), (x,), lambda g: (g * np.cos(xd),))


def cos(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(np.cos(xd), (x,), lambda g: (-g * np.sin(xd),))


def _reduce_half_period(t: np.ndarray) -> np.ndarray:
    # t - 2*round(t/2) is exact, so integer arguments land exactly on 0 or +-1
    return t - 2.0 * np.round(t / 2.0)


def np_sinpi(t: np.ndarray) -> np.ndarray:
    """sin(pi * t) with exact zeros at integers."""
    r = _reduce_half_period(t)
    r = np.where(r > 0.5, 1.0 - r, np.where(r < -0.5, -1.0 - r, r))
    return np.sin(np.pi * r).astype(t.dtype, copy=False)


def np_cospi(t: np.ndarray) -> np.ndarray:
    """cos(pi * t) with exact +-1 at integers and zeros at half-integers."""
    r = np.abs(_reduce_half_period(t))
    out = np.where(r > 0.5, -np.cos(np.pi * (1.0 - r)), np.cos(np.pi * r))
    out = np.where(r == 0.5, 0.0, out)
    return out.astype(t.dtype, copy=False)


def sinpi(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(np_sinpi(xd), (x,), lambda g: (g * (np.pi * np_cospi(xd)).astype(xd.dtype),))


def cospi(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(np_cospi(xd), (x,), lambda g: (-g * (np.pi * np_sinpi(xd)).astype(xd.dtype),))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., n, k) and ``b`` of shape (k, m) or (..., k, m)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_op(ad @ bd, (a, b), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return make_op(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError("concat", ref, t.shape)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return make_op(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                   lambda g: tuple(np.split(g, splits, axis=ax)))


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Inverse of :func:`concat`: cut ``x`` into consecutive pieces along ``axis``."""
    ax = axis % x.ndim
    if int(np.sum(sizes)) != x.shape[ax]:
        raise ShapeError("split", x.shape, tuple(sizes))
    bounds = np.cumsum([0, *sizes])
    pieces = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sl = (slice(None),) * ax + (slice(int(lo), int(hi)),)

        def bw(g, sl=sl):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[sl] = g
            return (full,)

        pieces.append(make_op(x.data[sl], (x,), bw))
    return pieces


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- normalizations

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax (empty last axis)", x.shape)
    y = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def bw(g):
        out = g - np.einsum("...i,...i->...", g, y)[..., None]
        out *= y
        return (out,)

    return make_op(y, (x,), bw)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("layer_norm (empty last axis)", x.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True)
                       - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = make_op(xhat, (x,), bw)
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, state: BatchNormState,
               training: bool) -> Tensor:
    """Batch norm over the last (feature) axis; statistics pool all leading axes.

    Training mode normalizes with batch statistics and updates the running
    averages (``running = momentum * running + (1 - momentum) * batch``).
    Eval mode is a fixed affine map built from the running statistics.
    """
    c = x.shape[-1]
    if state.running_mean.shape != (c,):
        raise ShapeError("batch_norm", x.shape, state.running_mean.shape)
    if not training:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        shift = -state.running_mean * inv
        xhat = make_op(x.data * inv.astype(x.dtype) + shift.astype(x.dtype), (x,),
                       lambda g: (g * inv.astype(x.dtype),))
        return add(mul(xhat, weight), bias)

    flat = x.data.reshape(-1, c)
    n = flat.shape[0]
    mu = flat.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).reshape(-1, c).mean(axis=0)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat_data = xc * inv
    m = state.momentum
    state.running_mean = m * state.running_mean + (1 - m) * mu
    unbiased = var * n / (n - 1) if n > 1 else var
    state.running_var = m * state.running_var + (1 - m) * unbiased

    def bw(g):
        g2 = g.reshape(-1, c)
        xh2 = xhat_data.reshape(-1, c)
        gx = inv * (g2 - g2.mean(axis=0) - xh2 * (g2 * xh2).mean(axis=0))
        return (gx.reshape(x.shape),)

    xhat = make_op(xhat_data, (x,), bw)
    return add(mul(xhat, weight), bias)


# ---------------------------------------------------------------- indexing

def max_reduce(x: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max over ``axis``; also returns the argmax (first occurrence on ties)."""
    ax = axis % x.ndim
    idx = np.argmax(x.data, axis=ax)
    vals = np.take_along_axis(x.data, np.expand_dims(idx, ax), axis=ax).squeeze(ax)
    src = x.shape

    def bw(g):
        out = np.zeros(src, dtype=g.dtype)
        np.put_along_axis(out, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (out,)

    return make_op(vals, (x,), bw), idx


def scatter_sum_rows(values: np.ndarray, index: np.ndarray, num_slots: int) -> np.ndarray:
    """Sum rows of ``values`` (n, C) into ``num_slots`` rows by ``index`` (n,).

    Each slot accumulates its rows left to right in input order.
    """
    out = np.zeros((num_slots,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, index, values)
    return out


def _flat_index(index: np.ndarray, x_shape: tuple[int, ...], op: str) -> tuple[np.ndarray, int]:
    """Batched row index into the flattened (B*M, C) view of ``x``."""
    m = x_shape[-2]
    if len(x_shape) == 2:
        flat = index
        slots = m
    elif len(x_shape) == 3:
        if index.shape[0] != x_shape[0]:
            raise ShapeError(op, x_shape, index.shape)
        offs = (np.arange(x_shape[0]) * m).reshape((-1,) + (1,) * (index.ndim - 1))
        flat = index + offs
        slots = x_shape[0] * m
    else:
        raise ShapeError(op, x_shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= m):
        raise IndexError(f"{op}: index out of range for {m} rows")
    return flat, slots


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows: ``x`` is (M, C) or batched (B, M, C); ``index`` is (...) or (B, ...).

    Output has shape ``index.shape + (C,)``.
    """
    index = np.asarray(index, dtype=np.int64)
    flat, slots = _flat_index(index, x.shape, "gather")
    c = x.shape[-1]
    rows = x.data.reshape(-1, c)
    src = x.shape

    def bw(g):
        return (scatter_sum_rows(g.reshape(-1, c), flat.ravel(), slots).reshape(src),)

    return make_op(rows[flat], (x,), bw)


def scatter_mean(x: Tensor, index: np.ndarray, num_slots: int) -> tuple[Tensor, np.ndarray]:
    """Average rows of ``x`` into ``num_slots`` slots by ``index``.

    ``x`` is (N, C) with ``index`` (N,), or batched (B, N, C) with ``index``
    (B, N). Returns the (…, num_slots, C) means (zero for empty slots) and the
    per-slot counts.
    """
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ShapeError("scatter_mean", x.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= num_slots):
        raise IndexError(f"scatter_mean: index out of range for {num_slots} slots")
    c = x.shape[-1]
    lead = x.shape[:-2]
    nb = int(np.prod(lead)) if lead else 1
    offs = (np.arange(nb) * num_slots).reshape(lead + (1,)) if lead else 0
    flat = (index + offs).ravel()
    total = nb * num_slots
    rows = x.data.reshape(-1, c)
    counts = np.bincount(flat, minlength=total)
    denom = np.maximum(counts, 1).astype(x.dtype)[:, None]
    # shift by each slot's first row so constant slots reproduce it exactly
    anchor = np.zeros((total, c), dtype=x.dtype)
    first = np.unique(flat, return_index=True)[1]
    anchor[flat[first]] = rows[first]
    sums = scatter_sum_rows(rows - anchor[flat], flat, total)
    means = (anchor + sums / denom).reshape(lead + (num_slots, c))
    per_row = (1.0 / denom[flat]).astype(x.dtype)
    src = x.shape

    def bw(g):
        return ((g.reshape(-1, c)[flat] * per_row).reshape(src),)

    return make_op(means, (x,), bw), counts.reshape(lead + (num_slots,))


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    """Outcome of a finite-difference comparison.

    ``rel_errors`` holds ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
    per checked element (NaN for excluded ones). ``floor`` is the roundoff level
    of a central difference divided by the tolerance, so gradients that are
    zero up to that noise are judged by their absolute mismatch. ``kinks`` are elements where the
    central difference disagreed but the analytic value matched a one-sided
    derivative, i.e. a nondifferentiable point inside the stencil.
    """

    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    tolerance: float
    floor: float = 1e-8
    kinks: list[tuple[int, int]] = field(default_factory=list)
    nonfinite: list[tuple[int, int]] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        finite = self.rel_errors[np.isfinite(self.rel_errors)]
        return float(finite.max()) if finite.size else 0.0

    @property
    def checked(self) -> int:
        return int(np.isfinite(self.rel_errors).sum())

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.max_rel_error <= self.tolerance

    def summary(self) -> str:
        return (f"checked={self.checked} max_rel_err={self.max_rel_error:.3e} "
                f"kinks={len(self.kinks)} nonfinite={len(self.nonfinite)} "
                f"{'PASS' if self.passed else 'FAIL'}")


def _rel(a, n, floor=1e-8):
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check_many(f: Callable[[], Tensor], tensors: Sequence[Tensor],
                    samples: Iterable[tuple[int, int]] | None = None,
                    step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic and central-difference gradients of scalar ``f()``.

    ``f`` reads ``tensors`` (perturbed in place). ``samples`` lists
    ``(tensor position, flat element index)`` pairs; all elements when omitted.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    loss = f()
    backward(loss)
    if samples is None:
        samples = [(ti, j) for ti, t in enumerate(tensors) for j in range(t.data.size)]
    samples = list(samples)
    analytic = np.empty(len(samples))
    numeric = np.empty(len(samples))
    rel = np.empty(len(samples))
    f0 = float(loss.data)
    # roundoff of (f+ - f-) / 2h, allowing ~100 ulps of error in the loss itself
    noise = 100 * np.finfo(loss.dtype).eps * max(abs(f0), 1.0) / step
    floor = max(1e-8, noise / tolerance)
    report = GradCheckReport(rel, analytic, numeric, tolerance, floor)
    for s, (ti, j) in enumerate(samples):
        t = tensors[ti]
        flat = t.data.reshape(-1)
        g = t.grad.reshape(-1)[j] if t.grad is not None else 0.0
        orig = flat[j]
        flat[j] = orig + step
        fp = float(f().data)
        flat[j] = orig - step
        fm = float(f().data)
        flat[j] = orig
        num = (fp - fm) / (2 * step)
        analytic[s], numeric[s] = g, num
        if not np.isfinite(num):
            report.nonfinite.append((ti, j))
            rel[s] = np.nan
            continue
        r = _rel(g, num, floor)
        if r > tolerance:
            right, left = (fp - f0) / step, (f0 - fm) / step
            if (_rel(right, left, floor) > tolerance
                    and min(_rel(g, right, floor), _rel(g, left, floor)) <= tolerance):
                report.kinks.append((ti, j))
                r = np.nan
        rel[s] = r
    if report.kinks:
        logger.info("grad_check excluded %d kink element(s)", len(report.kinks))
    return report


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
               tolerance: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of ``f`` at ``x`` over every element of ``x``."""
    return grad_check_many(lambda: f(x), [x], step=step, tolerance=tolerance)
