"""scikit-learn style front end for incremental adapter-routing training."""
from __future__ import annotations

from typing import Mapping, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .backbone import BackboneConfig, FrozenBackbone
from .diffcore import precision
from .seeding import component_rng
from .trainer import (TrainConfig, decision_function, extend_for_task, init_state, predict,
                      routing_weights, train_task)


def _check_images(X, image_size: int, channels: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and X.shape[1] == image_size * image_size * channels:
        X = X.reshape(-1, image_size, image_size, channels)
    if X.ndim != 4 or X.shape[1:] != (image_size, image_size, channels):
        raise ValueError(f"expected images of shape (n, {image_size}, {image_size}, {channels}) "
                         f"or flattened rows, got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("found an empty batch of images")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinite values")
    return X


class APARTClassifier(ClassifierMixin, BaseEstimator):
    """Class-incremental classifier over a frozen backbone with two adapter pools.

    Each ``partial_fit`` call is one task with a label set disjoint from every
    earlier call. ``fit`` resets the model and learns a single task.

    Parameters mirror :class:`TrainConfig` and :class:`BackboneConfig`; the
    backbone weights come from ``backbone_seed`` and everything trainable from
    ``random_state``.
    """

    def __init__(self, mode="full", epochs=10, batch_size=48, lr=0.003, weight_decay=0.0,
                 pool_size=5, bottleneck=64, alpha=1.0, theta=20, assigner_width=16,
                 image_size=32, channels=3, patch_size=4, embed_dim=64, depth=4, num_heads=4,
                 mlp_ratio=4, mlp_residual=True, adapter_identity=False, backbone_seed=0,
                 random_state=0, precision="f64"):
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.pool_size = pool_size
        self.bottleneck = bottleneck
        self.alpha = alpha
        self.theta = theta
        self.assigner_width = assigner_width
        self.image_size = image_size
        self.channels = channels
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.mlp_residual = mlp_residual
        self.adapter_identity = adapter_identity
        self.backbone_seed = backbone_seed
        self.random_state = random_state
        self.precision = precision

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, pool_size=self.pool_size,
                           bottleneck=self.bottleneck, alpha=self.alpha, theta=self.theta,
                           assigner_width=self.assigner_width, mode=self.mode,
                           seed=self.random_state)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(image_size=self.image_size, channels=self.channels,
                              patch_size=self.patch_size, embed_dim=self.embed_dim,
                              depth=self.depth, num_heads=self.num_heads,
                              mlp_ratio=self.mlp_ratio, seed=self.backbone_seed,
                              mlp_residual=self.mlp_residual,
                              adapter_identity=self.adapter_identity)

    def _initialize(self, backbone: Optional[FrozenBackbone] = None) -> None:
        with precision(self.precision):
            bb = backbone if backbone is not None else FrozenBackbone(self.backbone_config())
            self.state_ = init_state(self.train_config(), bb)
        self.batch_rng_ = component_rng(self.random_state, "batching")
        self.loss_traces_ = []
        self.classes_ = np.zeros(0, dtype=np.int64)

    def fit(self, X, y, class_counts: Optional[Mapping[int, int]] = None):
        self._initialize()
        return self.partial_fit(X, y, class_counts=class_counts)

    def partial_fit(self, X, y, class_counts: Optional[Mapping[int, int]] = None,
                    backbone: Optional[FrozenBackbone] = None):
        """Learn one new task. ``class_counts`` overrides the counts used as N(y)."""
        X = _check_images(X, self.image_size, self.channels)
        y = np.asarray(y).astype(np.int64).reshape(-1)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} rows but y has {len(y)} labels")
        if not hasattr(self, "state_"):
            self._initialize(backbone)
        task_classes = np.unique(y)
        with precision(self.precision):
            X = X.astype(np.float64)
            extend_for_task(self.state_, task_classes)
            trace = train_task(self.state_, X, y, self.batch_rng_, counts=class_counts)
        self.loss_traces_.append(trace)
        self.classes_ = self.state_.classes.copy()
        return self

    @property
    def n_tasks_(self) -> int:
        check_is_fitted(self, "state_")
        return self.state_.tasks_trained

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        X = _check_images(X, self.image_size, self.channels)
        with precision(self.precision):
            return decision_function(self.state_, X)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        X = _check_images(X, self.image_size, self.channels)
        with precision(self.precision):
            return predict(self.state_, X)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def routing_weights(self, X, y) -> np.ndarray:
        """Per-instance auxiliary-loss weight under the current routing."""
        check_is_fitted(self, "state_")
        X = _check_images(X, self.image_size, self.channels)
        with precision(self.precision):
            return routing_weights(self.state_, X, y)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.two_d_array = False
        return tags
