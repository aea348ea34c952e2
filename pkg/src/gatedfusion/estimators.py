"""Estimator-style wrappers over the functional training core.

``FusionClassifier`` trains any fusion variant on (n_samples, n_channels,
length) arrays with the familiar fit/predict/predict_proba surface;
``SensorFailureTransformer`` applies a corruption spec as a transform.
Both cooperate with model selection utilities via get_params/set_params.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_labels, check_matching_shape, check_signal_array
from .corruption import AssignmentScheme, CorruptionSpec, FailureModel, build_corrupted_dataset
from .datasets import Dataset
from .harness import ExperimentConfig, _train_single, predict
from .models import ModelConfig


class FusionClassifier(ClassifierMixin, BaseEstimator):
    """Multichannel time-series classifier with gated fusion.

    Parameters mirror the model/optimizer configuration; architecture
    dimensions not given here (channel count, signal length, class count)
    are inferred from the training data.
    """

    def __init__(
        self,
        variant: str = "argate_plus",
        epochs: int = 10,
        batch_size: int = 64,
        lr: float = 1e-3,
        feature_dim: int = 64,
        conv_channels=(16, 32),
        kernel: int = 5,
        pool: int = 2,
        fc_con_dim: int = 128,
        head_hidden: int = 128,
        aux_hidden: int = 64,
        alpha: float = 0.3,
        beta: float = 1.0,
        seed: int = 0,
    ):
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.feature_dim = feature_dim
        self.conv_channels = conv_channels
        self.kernel = kernel
        self.pool = pool
        self.fc_con_dim = fc_con_dim
        self.head_hidden = head_hidden
        self.aux_hidden = aux_hidden
        self.alpha = alpha
        self.beta = beta
        self.seed = seed

    def _model_config(self, n_channels: int, n_classes: int, length: int) -> ModelConfig:
        return ModelConfig(
            variant=self.variant,
            n_channels=n_channels,
            n_classes=n_classes,
            input_length=length,
            feature_dim=self.feature_dim,
            conv_channels=tuple(self.conv_channels),
            kernel=self.kernel,
            pool=self.pool,
            fc_con_dim=self.fc_con_dim,
            head_hidden=self.head_hidden,
            aux_hidden=self.aux_hidden,
            alpha=self.alpha,
            beta=self.beta,
            seed=self.seed,
        )

    def fit(self, X, y):
        X = check_signal_array(X)
        y = check_labels(y, X.shape[0])
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValueError("need at least 2 classes to fit")
        encoded = np.searchsorted(self.classes_, y)
        n, k, length = X.shape
        names = [f"chan_{i}" for i in range(k)]
        class_names = [str(c) for c in self.classes_]
        train_ds = Dataset(X, encoded, names, class_names)
        empty = Dataset(np.zeros((0, k, length)), np.zeros(0, dtype=np.int64), names, class_names)
        config = ExperimentConfig(
            model=self._model_config(k, self.classes_.size, length),
            dataset={"kind": "synth"},  # unused: data is passed in directly
            seeds=(self.seed,),
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer={"kind": "adam", "lr": self.lr},
        )
        model, train_curve, _ = _train_single(config, self.seed, train_ds, empty, None)
        self.model_ = model
        self.n_channels_ = k
        self.input_length_ = length
        self.train_curve_ = train_curve
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_matching_shape(X, self.n_channels_, self.input_length_)
        names = [f"chan_{i}" for i in range(self.n_channels_)]
        ds = Dataset(X, np.zeros(X.shape[0], dtype=np.int64), names, [str(c) for c in self.classes_])
        logits, _ = predict(self.model_, ds)
        return logits

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[logits.argmax(axis=1)]

    def predict_proba(self, X):
        logits = self._logits(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        z = np.exp(shifted)
        return z / z.sum(axis=1, keepdims=True)

    def fusion_weights(self, X) -> np.ndarray:
        """Per-sample gating weights (n_samples, n_channels); gating variants only."""
        check_is_fitted(self, "model_")
        from .harness import UnsupportedVariantError
        from .models import GATED_VARIANTS

        if self.variant not in GATED_VARIANTS:
            raise UnsupportedVariantError(f"variant {self.variant!r} has no fusion weights")
        X = check_matching_shape(X, self.n_channels_, self.input_length_)
        names = [f"chan_{i}" for i in range(self.n_channels_)]
        ds = Dataset(X, np.zeros(X.shape[0], dtype=np.int64), names, [str(c) for c in self.classes_])
        _, weights = predict(self.model_, ds)
        return weights


class SensorFailureTransformer(TransformerMixin, BaseEstimator):
    """Replaces channels with noise per a corruption policy.

    ``transform`` leaves a fraction of samples untouched and overwrites the
    failing channels of the rest; the per-sample failing sets are exposed on
    ``manifest_`` afterwards. Deterministic in (parameters, seed).
    """

    def __init__(
        self,
        failure: str = "uniform",
        scheme: str = "random",
        n_rclean: int = 0,
        corrupted_channels=(),
        train_range=(0, 0),
        test_range=(0, 0),
        clean_fraction: float = 1.0 / 3.0,
        phase: str = "train",
        seed: int = 0,
    ):
        self.failure = failure
        self.scheme = scheme
        self.n_rclean = n_rclean
        self.corrupted_channels = corrupted_channels
        self.train_range = train_range
        self.test_range = test_range
        self.clean_fraction = clean_fraction
        self.phase = phase
        self.seed = seed

    def _spec(self) -> CorruptionSpec:
        return CorruptionSpec(
            failure=FailureModel(self.failure),
            scheme=AssignmentScheme(
                kind=self.scheme,
                corrupted_channels=tuple(self.corrupted_channels),
                n_rclean=self.n_rclean,
                train_range=tuple(self.train_range),
                test_range=tuple(self.test_range),
            ),
            clean_fraction=self.clean_fraction,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        X = check_signal_array(X)
        self.n_channels_ = X.shape[1]
        self._spec().scheme.validate([f"chan_{i}" for i in range(self.n_channels_)])
        return self

    def transform(self, X):
        check_is_fitted(self, "n_channels_")
        X = check_matching_shape(X, self.n_channels_, X.shape[2])
        names = [f"chan_{i}" for i in range(self.n_channels_)]
        ds = Dataset(X, np.zeros(X.shape[0], dtype=np.int64), names, ["0"])
        corrupted, manifest = build_corrupted_dataset(ds, self._spec(), phase=self.phase)
        self.manifest_ = manifest
        return corrupted.x
