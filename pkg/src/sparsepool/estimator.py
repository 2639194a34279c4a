"""Scikit-learn style wrappers around the pooling operators and model.

``GlobalPooling2D`` is a stateless transformer that reduces feature maps to
channel vectors with any of the pooling modes. ``CropPoolClassifier`` owns
the full training loop (normalization, crop plans, SGD, the per-epoch
outlier-weight schedule) behind the usual fit/predict API.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .data import BatchLoader, channel_normalization
from .errors import NonFiniteError, TrainingDivergedError
from .layers import SgdConfig, sgd_step, softmax, softmax_xent
from .model import ModelSpec, init_params, model_backward, model_forward
from .pooling import PoolMode, Schedule, pool_forward


def _as_image_list(X):
    if isinstance(X, np.ndarray):
        if X.ndim != 4 or X.shape[1] != 3:
            raise ValueError(f"expected images shaped (n, 3, h, w), got {X.shape}")
        images = [np.ascontiguousarray(X[i], dtype=np.float32) for i in range(X.shape[0])]
    else:
        images = []
        for i, img in enumerate(X):
            arr = np.ascontiguousarray(img, dtype=np.float32)
            if arr.ndim != 3 or arr.shape[0] != 3:
                raise ValueError(f"image {i}: expected shape (3, h, w), got {arr.shape}")
            images.append(arr)
    if not images:
        raise ValueError("no images supplied")
    for i, img in enumerate(images):
        if not np.isfinite(img).all():
            raise ValueError(f"image {i} contains non-finite values")
    return images


class TrainingHistory:
    """Per-epoch training curves collected during fit."""

    def __init__(self):
        self.train_loss = []
        self.train_accuracy = []
        self.fallback_rate = []

    def as_dict(self):
        return {
            "train_loss": [float(v) for v in self.train_loss],
            "train_accuracy": [float(v) for v in self.train_accuracy],
            "fallback_rate": [float(v) for v in self.fallback_rate],
        }


def train_classifier(spec, loader, epochs, batch_size, sgd_config):
    """Run the SGD loop; returns (params, TrainingHistory).

    All randomness (init, epoch shuffles, per-image crop plans) derives
    from ``sgd_config.seed`` through disjoint SeedSequence children, so a
    repeated call is bitwise identical. The dynamic-pooling schedule
    advances once per epoch. A non-finite loss or gradient aborts with a
    structured diagnostic.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    root = np.random.SeedSequence(sgd_config.seed)
    init_ss, order_ss, crop_ss = root.spawn(3)
    params = init_params(spec, init_ss)
    state = {}
    order_children = order_ss.spawn(epochs)
    crop_children = crop_ss.spawn(epochs)
    n = len(loader)
    history = TrainingHistory()
    for epoch in range(epochs):
        schedule = Schedule(epoch, epochs) if spec.pool_mode.needs_schedule else None
        order = np.random.default_rng(order_children[epoch]).permutation(n)
        plan_seeds = crop_children[epoch].spawn(n)
        loss_sum = 0.0
        correct = 0
        fallback_sum = 0.0
        batches = 0
        for batch_index, start in enumerate(range(0, n, batch_size)):
            ids = [int(i) for i in order[start:start + batch_size]]
            inputs, labels = loader.batch(ids, "train", [plan_seeds[i] for i in ids])
            logits, ctx = model_forward(inputs, spec, params, schedule)
            loss, grad_logits = softmax_xent(logits, labels)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}",
                    epoch=epoch, batch=batch_index, where="loss",
                )
            grads = model_backward(grad_logits, ctx)
            try:
                sgd_step(params, grads, state, sgd_config)
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite gradient at epoch {epoch}, "
                    f"batch {batch_index}: {exc}",
                    epoch=epoch, batch=batch_index, where=str(exc),
                ) from exc
            loss_sum += float(loss) * len(ids)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
            fallback_sum += ctx.fallback_rate()
            batches += 1
        history.train_loss.append(loss_sum / n)
        history.train_accuracy.append(correct / n)
        history.fallback_rate.append(fallback_sum / batches)
    return params, history


def inference_schedule(spec, epochs):
    """Schedule used after training: the weight ramp sits at its endpoint."""
    if spec.pool_mode.needs_schedule:
        return Schedule(epochs, epochs)
    return None


def predict_logits(spec, params, loader, batch_size, schedule):
    """Test-mode logits for every image in the loader."""
    chunks = []
    ids = list(range(len(loader)))
    for start in range(0, len(ids), batch_size):
        inputs, _ = loader.batch(ids[start:start + batch_size], "test")
        logits, _ = model_forward(inputs, spec, params, schedule)
        chunks.append(logits)
    return np.concatenate(chunks, axis=0)


class GlobalPooling2D(TransformerMixin, BaseEstimator):
    """Reduce (n, c, h, w) feature maps to (n, c) pooled channel vectors.

    ``current_epoch``/``total_epochs`` are only consulted for the dynamic
    mode, where they set the schedule weights.
    """

    def __init__(self, kind="outlier", lam=2.0, current_epoch=None, total_epochs=None):
        self.kind = kind
        self.lam = lam
        self.current_epoch = current_epoch
        self.total_epochs = total_epochs

    def _mode_and_schedule(self):
        mode = PoolMode.parse(self.kind, self.lam)
        schedule = None
        if mode.needs_schedule:
            if self.current_epoch is None or self.total_epochs is None:
                raise ValueError(
                    "dynamic pooling needs current_epoch and total_epochs"
                )
            schedule = Schedule(self.current_epoch, self.total_epochs)
        return mode, schedule

    def fit(self, X, y=None):
        self._mode_and_schedule()
        X = np.asarray(X)
        if X.ndim != 4:
            raise ValueError(f"expected a rank-4 array, got shape {X.shape}")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        mode, schedule = self._mode_and_schedule()
        feats, _ = pool_forward(np.asarray(X), mode, schedule)
        return feats


class CropPoolClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier with pooled trunk features and an SGD-trained head.

    ``kind`` picks the branch layout (global, local, or multires) and
    ``pool`` the pooling operator used to collapse feature maps. Inputs to
    fit/predict are raw images in [0, 1], shaped (n, 3, h, w) or given as a
    sequence of (3, h, w) arrays; channel normalization is learned from the
    training images.
    """

    def __init__(self, kind="multires", pool="dynamic", lam=2.0, epochs=20,
                 batch_size=64, learning_rate=0.015, momentum=0.9,
                 global_size=32, crop_size=32, crops_per_image=4,
                 trunk_widths=(16,), seed=0):
        self.kind = kind
        self.pool = pool
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.global_size = global_size
        self.crop_size = crop_size
        self.crops_per_image = crops_per_image
        self.trunk_widths = trunk_widths
        self.seed = seed

    def _build_spec(self, num_classes):
        mode = PoolMode.parse(self.pool, self.lam)
        return ModelSpec(
            kind=self.kind, num_classes=num_classes,
            global_input_size=self.global_size, local_crop_size=self.crop_size,
            crops_per_image=self.crops_per_image, pool_mode=mode,
            trunk_widths=tuple(self.trunk_widths),
        )

    def fit(self, X, y):
        images = _as_image_list(X)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(images):
            raise ValueError(
                f"labels must be one per image: {len(images)} images, shape {y.shape}"
            )
        classes, y_idx = np.unique(y, return_inverse=True)
        if classes.size < 2:
            raise ValueError("need at least two classes to fit")
        spec = self._build_spec(int(classes.size))
        mean, std = channel_normalization(images)
        loader = BatchLoader(images, y_idx, spec, mean, std)
        sgd = SgdConfig(learning_rate=self.learning_rate, momentum=self.momentum,
                        seed=self.seed)
        params, history = train_classifier(
            spec, loader, epochs=self.epochs, batch_size=self.batch_size,
            sgd_config=sgd,
        )
        self.classes_ = classes
        self.spec_ = spec
        self.params_ = params
        self.history_ = history.as_dict()
        self.mean_ = mean
        self.std_ = std
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(
                "this CropPoolClassifier is not fitted yet; call fit first"
            )

    def decision_function(self, X):
        self._check_fitted()
        images = _as_image_list(X)
        loader = BatchLoader(images, np.zeros(len(images), dtype=np.int64),
                             self.spec_, self.mean_, self.std_)
        schedule = inference_schedule(self.spec_, self.epochs)
        return predict_logits(self.spec_, self.params_, loader,
                              self.batch_size, schedule)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]
