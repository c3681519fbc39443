"""scikit-learn compatible classifier around the dual-scale network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from .data import AugmentConfig
from .model import DSPointNet, ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, predict_logits, softmax_probs, train_arrays
from .validation import check_labels, check_point_clouds


class DSPointClassifier(ClassifierMixin, BaseEstimator):
    """Point-cloud shape classifier.

    ``X`` is an (M, N, 3) array or a sequence of (N_i, 3) coordinate arrays.
    Each cloud is cut (or cyclically padded) to ``n_points`` and normalized to
    the unit cube before it reaches the network.

    Parameters mirror :class:`~dspoint.model.ModelConfig` and
    :class:`~dspoint.train.TrainConfig`. ``eval_set`` passed to :meth:`fit`
    picks the kept epoch; without it the training data is used.
    """

    def __init__(self, channels=(64, 64, 128), resolutions=(8, 6, 4), n_neighbors=8,
                 local_ratio=0.75, n_heads=4, hf_levels=10, hf_local="back", hf_global="back",
                 n_points=1024, kernel_hidden=16, head_dims=(1024, 512), local_op="dynconv",
                 dtype="float32", batch_size=32, learning_rate=1e-3, weight_decay=1e-4,
                 max_epochs=250, lr_factor=0.5, lr_patience=10, min_lr=1e-5, augment=True,
                 random_state=0):
        self.channels = channels
        self.resolutions = resolutions
        self.n_neighbors = n_neighbors
        self.local_ratio = local_ratio
        self.n_heads = n_heads
        self.hf_levels = hf_levels
        self.hf_local = hf_local
        self.hf_global = hf_global
        self.n_points = n_points
        self.kernel_hidden = kernel_hidden
        self.head_dims = head_dims
        self.local_op = local_op
        self.dtype = dtype
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.lr_factor = lr_factor
        self.lr_patience = lr_patience
        self.min_lr = min_lr
        self.augment = augment
        self.random_state = random_state

    def _model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            channels=tuple(self.channels), resolutions=tuple(self.resolutions), k=self.n_neighbors,
            local_ratio=self.local_ratio, heads=self.n_heads, hf_levels=self.hf_levels,
            hf_local=self.hf_local, hf_global=self.hf_global, n_points=self.n_points,
            num_classes=num_classes, kernel_hidden=self.kernel_hidden,
            head_dims=tuple(self.head_dims), local_op=self.local_op, dtype=self.dtype,
            seed=0 if self.random_state is None else int(self.random_state),
        ).validate()

    def _train_config(self) -> TrainConfig:
        aug = AugmentConfig() if self.augment else AugmentConfig(False, False, False)
        return TrainConfig(batch_size=self.batch_size, lr=self.learning_rate,
                           weight_decay=self.weight_decay, epochs=self.max_epochs,
                           factor=self.lr_factor, patience=self.lr_patience, min_lr=self.min_lr,
                           seed=0 if self.random_state is None else int(self.random_state),
                           augment=aug).validate()

    def fit(self, X, y, eval_set=None):
        coords = check_point_clouds(X, self.n_points)
        y = check_labels(y, len(coords))
        check_classification_targets(y)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        codes = self._encoder.transform(y)
        if eval_set is not None:
            ex, ey = eval_set
            eval_coords = check_point_clouds(ex, self.n_points)
            eval_codes = self._encoder.transform(check_labels(ey, len(eval_coords)))
        else:
            eval_coords, eval_codes = coords, codes
        model = DSPointNet(self._model_config(len(self.classes_)))
        result = train_arrays(model, coords, codes, eval_coords, eval_codes, self._train_config())
        self.model_ = result.model
        self.history_ = result.log
        self.best_score_ = result.best_accuracy
        self.best_epoch_ = result.best_epoch
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        coords = check_point_clouds(X, self.model_.config.n_points)
        return predict_logits(self.model_, coords, self.batch_size)

    def predict_proba(self, X) -> np.ndarray:
        return softmax_probs(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        """Max-pooled global descriptors, shape (M, head_dims[0])."""
        check_is_fitted(self, "model_")
        coords = check_point_clouds(X, self.model_.config.n_points)
        self.model_.eval()
        return np.concatenate([self.model_.embed(coords[i:i + self.batch_size]).data
                               for i in range(0, len(coords), self.batch_size)])

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, {"classes": self.classes_.tolist(),
                                            "params": _jsonable(self.get_params())})

    @classmethod
    def load(cls, path) -> "DSPointClassifier":
        model, meta = load_checkpoint(path)
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in meta.get("params", {}).items()}
        est = cls(**params)
        est.model_ = model
        est.classes_ = np.asarray(meta.get("classes", list(range(model.config.num_classes))))
        est._encoder = LabelEncoder().fit(est.classes_)
        return est


def _jsonable(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
