"""First-order optimizers operating in place on Parameter lists."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter


class SGD:
    """Plain stochastic gradient descent: w <- w - lr * g."""

    def __init__(self, lr: float = 1e-3):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)

    def step(self, params: list[Parameter]) -> None:
        for p in params:
            p.value -= self.lr * p.grad


class Adam:
    """Adam with bias-corrected first and second moments."""

    def __init__(
        self,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)

    def step(self, params: list[Parameter]) -> None:
        for p in params:
            st = p.state
            if "adam_m" not in st:
                st["adam_m"] = np.zeros_like(p.value)
                st["adam_v"] = np.zeros_like(p.value)
                st["adam_t"] = 0
            st["adam_t"] += 1
            t = st["adam_t"]
            m, v = st["adam_m"], st["adam_v"]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(hyper: dict):
    """Build an optimizer from a {kind, lr, ...} mapping."""
    kind = hyper.get("kind", "adam")
    lr = hyper.get("lr", 1e-3)
    if kind == "sgd":
        return SGD(lr=lr)
    if kind == "adam":
        return Adam(
            lr=lr,
            beta1=hyper.get("beta1", 0.9),
            beta2=hyper.get("beta2", 0.999),
            eps=hyper.get("eps", 1e-8),
        )
    raise ValueError(f"unknown optimizer kind {kind!r}; expected 'sgd' or 'adam'")


def optimizer_step(params: list[Parameter], hyper: dict) -> None:
    """One-shot update: builds the optimizer from ``hyper`` and steps once.

    Stateful optimizers keep their moment buffers on each Parameter's
    ``state`` dict, so repeated calls continue the same trajectory.
    """
    make_optimizer(hyper).step(params)
