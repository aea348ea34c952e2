"""Differentiable primitives over float64 tensors.

Each primitive computes its forward value with numpy and records a backward
closure on the active tape. The set is closed: matrix multiply, 1-D
convolution, 1-D max pooling, ReLU, sigmoid, softmax, exponential, square,
negation, elementwise add/multiply, concatenate, mean/sum reductions, a fused
softmax-cross-entropy, plus reshape/narrow for wiring layers together.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, record

_REGISTRY: dict[str, callable] = {}


def register(name: str):
    def deco(fn):
        _REGISTRY[name] = fn
        return fn

    return deco


def forward(op_kind: str, inputs, **kwargs) -> Tensor:
    """Apply a primitive by name; records on the active tape."""
    fn = _REGISTRY.get(op_kind)
    if fn is None:
        raise KeyError(f"unknown primitive {op_kind!r}; known: {sorted(_REGISTRY)}")
    return fn(*inputs, **kwargs)


def registered_ops() -> list[str]:
    return sorted(_REGISTRY)


def backward(tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradient map (node id -> array) for a scalar loss recorded on ``tape``."""
    return tape.gradients(loss)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


@register("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), out, bwd)


@register("multiply")
def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"multiply: cannot broadcast {a.shape} with {b.shape}") from None
    a_data, b_data = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return record("multiply", (a, b), out, bwd)


@register("negate")
def negate(a) -> Tensor:
    a = as_tensor(a)
    return record("negate", (a,), -a.data, lambda g: (-g,))


@register("square")
def square(a) -> Tensor:
    a = as_tensor(a)
    a_data = a.data
    return record("square", (a,), a_data * a_data, lambda g: (2.0 * a_data * g,))


@register("exp")
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * out,))


@register("relu")
def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return record("relu", (a,), out, lambda g: (g * mask,))


@register("sigmoid")
def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # Sign-split form never exponentiates a positive argument.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


@register("softmax")
def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return record("softmax", (a,), out, bwd)


@register("matmul")
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def bwd(g):
        return g @ b_data.T, a_data.T @ g

    return record("matmul", (a, b), a_data @ b_data, bwd)


@register("reshape")
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    orig = a.shape
    return record("reshape", (a,), out, lambda g: (g.reshape(orig),))


@register("narrow")
def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` elements along ``axis`` starting at ``start``."""
    a = as_tensor(a)
    if start < 0 or length < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) outside axis {axis} of {a.shape}"
        )
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]
    shape = a.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=np.float64)
        gx[idx] = g
        return (gx,)

    return record("narrow", (a,), out, bwd)


@register("concatenate")
def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concatenate: need at least one input")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concatenate", tensors, out, bwd)


@register("sum_reduce")
def sum_reduce(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum_reduce", (a,), out, bwd)


@register("mean_reduce")
def mean_reduce(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis)
    shape = a.shape
    count = a.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        g = np.expand_dims(g / count, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("mean_reduce", (a,), out, bwd)


@register("conv1d")
def conv1d(x, weight, *, stride: int = 1, groups: int = 1) -> Tensor:
    """Valid (no padding) 1-D convolution.

    x: (batch, in_channels, length); weight: (out_channels, in_channels/groups,
    kernel). Output: (batch, out_channels, (length - kernel)//stride + 1).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-D x and weight, got {x.shape}, {weight.shape}")
    B, C_in, L = x.shape
    C_out, C_in_g, K = weight.shape
    if C_in % groups or C_out % groups:
        raise ShapeError(f"conv1d: channels ({C_in} in, {C_out} out) not divisible by groups={groups}")
    if C_in_g != C_in // groups:
        raise ShapeError(f"conv1d: weight expects {C_in_g} channels/group, input supplies {C_in // groups}")
    if K > L:
        raise ShapeError(f"conv1d: kernel {K} longer than input {L}")
    L_out = (L - K) // stride + 1
    O_g = C_out // groups

    wins = sliding_window_view(x.data, K, axis=2)[:, :, ::stride]  # (B, C_in, L_out, K)
    out = np.empty((B, C_out, L_out), dtype=np.float64)
    cols_per_group = []
    for g_i in range(groups):
        cols = np.ascontiguousarray(
            wins[:, g_i * C_in_g : (g_i + 1) * C_in_g]
            .transpose(0, 2, 1, 3)
            .reshape(B * L_out, C_in_g * K)
        )
        cols_per_group.append(cols)
        wg = weight.data[g_i * O_g : (g_i + 1) * O_g].reshape(O_g, C_in_g * K)
        out[:, g_i * O_g : (g_i + 1) * O_g] = (
            (cols @ wg.T).reshape(B, L_out, O_g).transpose(0, 2, 1)
        )

    w_data = weight.data
    x_shape = x.shape

    def bwd(g):
        gx = np.zeros(x_shape, dtype=np.float64)
        gw = np.empty_like(w_data)
        for g_i in range(groups):
            g_flat = (
                np.ascontiguousarray(g[:, g_i * O_g : (g_i + 1) * O_g].transpose(0, 2, 1))
                .reshape(B * L_out, O_g)
            )
            cols = cols_per_group[g_i]
            gw[g_i * O_g : (g_i + 1) * O_g] = (g_flat.T @ cols).reshape(O_g, C_in_g, K)
            wg = w_data[g_i * O_g : (g_i + 1) * O_g].reshape(O_g, C_in_g * K)
            gcols = (g_flat @ wg).reshape(B, L_out, C_in_g, K).transpose(0, 2, 1, 3)
            gx_g = gx[:, g_i * C_in_g : (g_i + 1) * C_in_g]
            for k in range(K):
                gx_g[:, :, k : k + L_out * stride : stride] += gcols[:, :, :, k]
        return gx, gw

    return record("conv1d", (x, weight), out, bwd)


@register("maxpool1d")
def maxpool1d(x, *, width: int, stride: int | None = None) -> Tensor:
    """Valid 1-D max pooling; ties resolved to the first (leftmost) index."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d: expected 3-D input, got {x.shape}")
    if stride is None:
        stride = width
    B, C, L = x.shape
    if width > L:
        raise ShapeError(f"maxpool1d: window {width} longer than input {L}")
    L_out = (L - width) // stride + 1
    wins = sliding_window_view(x.data, width, axis=2)[:, :, ::stride]  # (B, C, L_out, width)
    idx = wins.argmax(axis=3)  # argmax returns the first maximal index
    out = np.take_along_axis(wins, idx[..., None], axis=3)[..., 0]
    src = idx + stride * np.arange(L_out)

    def bwd(g):
        gx = np.zeros((B, C, L), dtype=np.float64)
        if stride >= width:
            # Non-overlapping windows: destinations are unique, direct scatter.
            b_i, c_i = np.ogrid[:B, :C]
            gx[b_i[..., None], c_i[..., None], src] = g
        else:
            flat = (np.arange(B)[:, None, None] * C + np.arange(C)[None, :, None]) * L + src
            np.add.at(gx.reshape(-1), flat.ravel(), g.ravel())
        return (gx,)

    return record("maxpool1d", (x,), out, bwd)


@register("softmax_cross_entropy")
def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-example cross-entropy of softmax(logits) against integer labels.

    Fused with max-subtracted log-sum-exp so large logits cannot overflow.
    Returns a length-batch vector of losses.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match batch {B}"
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError("softmax_cross_entropy: labels must be integers")
    if labels.min() < 0 or labels.max() >= C:
        raise ShapeError(f"softmax_cross_entropy: labels outside [0, {C})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1)
    losses = np.log(z) - shifted[np.arange(B), labels]
    probs = e / z[:, None]

    def bwd(g):
        glogits = probs * g[:, None]
        glogits[np.arange(B), labels] -= g
        return (glogits,)

    return record("softmax_cross_entropy", (logits,), losses, bwd)
