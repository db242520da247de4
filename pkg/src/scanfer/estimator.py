"""scikit-learn estimator wrapper around the network and its training loop."""

from __future__ import annotations

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import NUM_CLASSES, AugmentPolicy
from .metrics import EvalReport
from .model import BackboneConfig, FerConfig, FerModel, model_forward, predict
from .optim import TrainConfig, fit
from .tensor import no_grad


def check_images(X, size: int) -> np.ndarray:
    """Validate an ``n x 3 x S x S`` float batch with values in [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 4 or X.shape[1:] != (3, size, size):
        raise ValueError(f"expected images shaped (n, 3, {size}, {size}), got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if y.dtype.kind == "f":
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integer class indices")
    elif y.dtype.kind not in "iu":
        raise ValueError(f"labels must be integer class indices, got dtype {y.dtype}")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= NUM_CLASSES):
        raise ValueError(f"labels must lie in [0, {NUM_CLASSES})")
    return y


class ScanFerClassifier(ClassifierMixin, BaseEstimator):
    """Seven-way expression classifier (SCAN local/global branch + CCI branch).

    ``X`` is a float array of shape ``(n, 3, S, S)`` in [0, 1], ``y`` holds
    class indices 0..6. Hyperparameter defaults are the full-scale training
    recipe; ``backbone="desk"`` keeps runs CPU-sized.
    """

    def __init__(self, backbone="desk", input_size=None, grid=(5, 5), k=4, lam=0.2, epochs=20,
                 batch_size=64, lr_backbone=1e-4, lr_heads=1e-3, momentum=0.9, weight_decay=1e-3,
                 lr_decay=0.95, sampler="imbalanced", augment=True, random_state=0):
        self.backbone = backbone
        self.input_size = input_size
        self.grid = grid
        self.k = k
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_backbone = lr_backbone
        self.lr_heads = lr_heads
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_decay = lr_decay
        self.sampler = sampler
        self.augment = augment
        self.random_state = random_state

    def _fer_config(self) -> FerConfig:
        preset = BackboneConfig.preset(self.backbone)
        if self.input_size not in (None, preset.input_size):
            preset = BackboneConfig(preset.stages, preset.tap_u, preset.tap_l, int(self.input_size))
        side = int(round(np.sqrt(self.k)))
        if side * side != self.k:
            raise ValueError(f"k must be a perfect square, got {self.k}")
        return FerConfig(backbone=preset, grid=tuple(self.grid), cci_grid=(side, side), lam=float(self.lam))

    def _train_config(self) -> TrainConfig:
        policy = AugmentPolicy() if self.augment is True else (self.augment or None)
        return TrainConfig(self.epochs, self.batch_size, self.lr_backbone, self.lr_heads, self.momentum,
                           self.weight_decay, self.lr_decay, self.sampler, policy, int(self.random_state or 0))

    def fit(self, X, y, X_val=None, y_val=None):
        config = self._fer_config()
        size = config.backbone.input_size
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = check_images(X, size)
        y = check_labels(y)
        val = None
        if X_val is not None:
            val = (check_images(X_val, size), check_labels(y_val))
        self.model_ = FerModel.create(config, seed=int(self.random_state or 0))
        result = fit(self.model_, (X, y), val, config=self._train_config())
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.arange(NUM_CLASSES)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _images(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return check_images(X, self.model_.config.backbone.input_size)

    def decision_function(self, X) -> np.ndarray:
        X = self._images(X)
        with no_grad():
            chunks = [model_forward(self.model_, X[i:i + 64]).logits_u.data for i in range(0, len(X), 64)]
        return np.concatenate(chunks) if chunks else np.zeros((0, NUM_CLASSES))

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X) -> np.ndarray:
        X = self._images(X)
        return predict(self.model_, X)

    def report(self, X, y) -> EvalReport:
        """Accuracy, per-class/macro F1 and the overall challenge score."""
        return EvalReport.from_predictions(check_labels(y), self.predict(X))
