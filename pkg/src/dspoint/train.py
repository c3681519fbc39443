"""Loss, Adam with coupled L2 decay, plateau schedule, training and evaluation loops."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import AugmentConfig, Dataset, PointCloud, augment, normalize_coords, sample_first_k
from .model import ConfigError, DSPointNet, ModelConfig

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 250
    factor: float = 0.5
    patience: int = 10
    min_lr: float = 1e-5
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)

    def validate(self) -> "TrainConfig":
        problems = []
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.lr <= 0:
            problems.append("lr must be > 0")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if not 0 < self.factor < 1:
            problems.append("factor must be in (0, 1)")
        if self.patience < 1:
            problems.append("patience must be >= 1")
        if self.min_lr <= 0:
            problems.append("min_lr must be > 0")
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown train field {name!r}" for name in unknown])
        if isinstance(d.get("augment"), dict):
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)


@dataclass
class TrainState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    lr: float
    step: int = 0
    best_metric: float = -np.inf
    epochs_since_improvement: int = 0
    skipped_steps: int = 0

    @classmethod
    def create(cls, params: list[Tensor], lr: float) -> "TrainState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], lr)


# ---------------------------------------------------------------- loss

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]``; accepts (K,) with an int or (B, K) with (B,)."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    x = logits.data.reshape(-1, logits.shape[-1])
    k = x.shape[1]
    if labels.shape != (x.shape[0],):
        raise ad.ShapeError("cross_entropy", logits.shape, labels.shape)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = x - x.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return ((grad * (g / len(labels))).reshape(logits.shape).astype(logits.dtype),)

    return ad.make_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- optimizer and schedule

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(params: list[Tensor], state: TrainState, lr: float | None = None,
              weight_decay: float = 0.0) -> bool:
    """One Adam update from each parameter's ``grad``; L2 decay is added to the gradient.

    A step with any non-finite gradient is skipped and reported; returns whether
    the update was applied.
    """
    lr = state.lr if lr is None else lr
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped_steps += 1
        logger.warning("skipping optimizer step %d: non-finite gradient", state.step + 1)
        return False
    state.step += 1
    t = state.step
    c1 = 1 - BETA1 ** t
    c2 = 1 - BETA2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if weight_decay:
            g = g + weight_decay * p.data
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.data -= update.astype(p.dtype, copy=False)
    return True


def plateau_schedule(state: TrainState, metric: float, factor: float = 0.5, patience: int = 10,
                     min_lr: float = 1e-5) -> float:
    """Reduce-on-plateau for a metric to maximize; returns the (possibly reduced) lr."""
    if metric > state.best_metric:
        state.best_metric = metric
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement >= patience:
            state.lr = max(state.lr * factor, min_lr)
            state.epochs_since_improvement = 0
    return state.lr


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray
    predictions: np.ndarray

    def format(self, class_names: list[str] | None = None) -> str:
        k = len(self.confusion)
        names = class_names or [str(i) for i in range(k)]
        width = max(8, *(len(n) for n in names))
        lines = [f"accuracy: {self.accuracy:.4f}", "confusion (rows=true, cols=pred):",
                 " " * width + " ".join(f"{n[:width]:>{width}}" for n in names)]
        for name, row in zip(names, self.confusion):
            lines.append(f"{name:>{width}}" + " ".join(f"{v:>{width}d}" for v in row))
        lines.append("per-class: " + ", ".join(
            f"{n}={a:.3f}" for n, a in zip(names, self.per_class_accuracy)))
        return "\n".join(lines)


def predict_logits(model: DSPointNet, coords: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode logits for an (M, N, 3) array, computed in batches."""
    was_training = model.training
    model.eval()
    try:
        out = [model(coords[i:i + batch_size]).data for i in range(0, len(coords), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def evaluate_arrays(model: DSPointNet, coords: np.ndarray, labels: np.ndarray,
                    batch_size: int = 32) -> EvalResult:
    k = model.config.num_classes
    preds = predict_logits(model, coords, batch_size).argmax(axis=1)
    labels = np.asarray(labels, dtype=np.int64)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    support = confusion.sum(axis=1)
    per_class = np.divide(np.diag(confusion), support, out=np.zeros(k), where=support > 0)
    acc = float((preds == labels).mean()) if len(labels) else 0.0
    return EvalResult(acc, per_class, confusion, preds)


def prepare_clouds(dataset: Dataset, n_points: int) -> np.ndarray:
    """Sample each cloud to ``n_points`` and normalize it to the unit cube."""
    return np.stack([normalize_coords(sample_first_k(pc, n_points).coords) for pc in dataset.items])


def evaluate(dataset: Dataset, model: DSPointNet, batch_size: int = 32) -> EvalResult:
    return evaluate_arrays(model, prepare_clouds(dataset, model.config.n_points), dataset.labels, batch_size)


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    model: DSPointNet
    best_state: dict[str, np.ndarray]
    best_accuracy: float | None
    best_epoch: int | None
    log: list[dict]


def _augment_batch(coords: np.ndarray, seed: int, epoch: int, idx: np.ndarray,
                   cfg: AugmentConfig) -> np.ndarray:
    return np.stack([augment(PointCloud(coords[i]), (seed, epoch, int(i)), cfg).coords for i in idx])


def train_arrays(model: DSPointNet, train_x: np.ndarray, train_y: np.ndarray,
                 eval_x: np.ndarray, eval_y: np.ndarray, cfg: TrainConfig,
                 log_path: str | Path | None = None,
                 on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train on preprocessed (M, N, 3) arrays, keeping the state with the best eval accuracy."""
    cfg.validate()
    if len(train_x) == 0:
        raise ValueError("empty training set")
    params = model.parameters()
    state = TrainState.create(params, cfg.lr)
    best_state = model.state_dict()
    best_acc, best_epoch = -1.0, -1
    log: list[dict] = []
    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w")
    shuffle_rng = np.random.default_rng(cfg.seed)
    n_batches = max(len(train_x) // cfg.batch_size, 1)
    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = shuffle_rng.permutation(len(train_x))
            losses = []
            for b in range(n_batches):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = _augment_batch(train_x, cfg.seed, epoch, idx, cfg.augment)
                model.zero_grad()
                loss = cross_entropy(model(batch), train_y[idx])
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} batch {b} (lr={state.lr:g})")
                ad.backward(loss)
                adam_step(params, state, weight_decay=cfg.weight_decay)
                losses.append(value)
            acc = evaluate_arrays(model, eval_x, eval_y, cfg.batch_size).accuracy
            lr_used = state.lr
            plateau_schedule(state, acc, cfg.factor, cfg.patience, cfg.min_lr)
            if acc > best_acc:
                best_acc, best_epoch = acc, epoch
                best_state = model.state_dict()
            record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "eval_acc": acc, "lr": lr_used}
            log.append(record)
            logger.info("epoch %d loss %.4f acc %.4f lr %g", epoch, record["train_loss"], acc, lr_used)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if on_epoch is not None:
                on_epoch(record)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.load_state_dict(best_state)
    model.eval()
    if not log:
        return TrainResult(model, best_state, None, None, log)
    return TrainResult(model, best_state, best_acc, best_epoch, log)


def train_loop(train: Dataset, test: Dataset, model_config: ModelConfig, cfg: TrainConfig,
               log_path: str | Path | None = None) -> TrainResult:
    if len(train) == 0 or len(test) == 0:
        raise ValueError("training and evaluation datasets must be non-empty")
    model = DSPointNet(model_config)
    n = model_config.n_points
    return train_arrays(model, prepare_clouds(train, n), train.labels,
                        prepare_clouds(test, n), test.labels, cfg, log_path)


def read_metric_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
