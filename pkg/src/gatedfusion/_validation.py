"""Input checks shared by the estimator layer."""

from __future__ import annotations

import numpy as np


def check_signal_array(X, *, name: str = "X") -> np.ndarray:
    """Validate a (n_samples, n_channels, length) float array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"{name} must be 3-dimensional (samples, channels, length), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} has no samples")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"y must be 1-dimensional with {n_samples} entries, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        cast = y.astype(np.int64)
        if not np.array_equal(cast, y):
            raise ValueError("y must hold integer class labels")
        y = cast
    return y.astype(np.int64)


def check_matching_shape(X, n_channels: int, length: int, *, name: str = "X") -> np.ndarray:
    X = check_signal_array(X, name=name)
    if X.shape[1] != n_channels or X.shape[2] != length:
        raise ValueError(
            f"{name} has shape {X.shape[1:]} per sample; this estimator was fitted "
            f"on ({n_channels}, {length})"
        )
    return X
