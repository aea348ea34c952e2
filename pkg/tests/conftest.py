import os

import numpy as np
import pytest

from gatedfusion.autodiff import Tape, Tensor


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_gradient(build, x: np.ndarray, tol: float = 1e-4, h: float = 1e-5) -> float:
    """Compare tape gradients against central differences.

    ``build`` maps a watched input tensor to a scalar loss tensor. Returns
    the relative error max|analytic - numeric| / max(1, max|numeric|).
    """
    x = np.asarray(x, dtype=np.float64)
    with Tape() as tape:
        xt = tape.watch(x)
        loss = build(xt)
        grads = tape.gradients(loss)
    analytic = grads[xt.node]

    def scalar(arr):
        with Tape() as t2:
            return float(build(t2.watch(arr)).data)

    numeric = numeric_gradient(scalar, x, h=h)
    err = np.abs(analytic - numeric).max() / max(1.0, np.abs(numeric).max())
    assert err < tol, f"gradient mismatch: relative error {err:.3e} >= {tol}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def har_root():
    """Directory holding the human-activity recognition dataset, if present."""
    root = os.environ.get("GATEDFUSION_HAR_ROOT", "/root/pkg/data/har")
    marker = os.path.join(root, "train", "y_train.txt")
    return root if os.path.exists(marker) else None


requires_har = pytest.mark.skipif(
    har_root() is None,
    reason=(
        "human-activity dataset not present in this environment; "
        "set GATEDFUSION_HAR_ROOT to the extracted 'UCI HAR Dataset' directory"
    ),
)
