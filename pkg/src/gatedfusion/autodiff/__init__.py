"""Reverse-mode automatic differentiation over dense float64 tensors."""

from .checkpoint import (
    CheckpointError,
    load_arrays,
    load_parameters,
    save_arrays,
    save_parameters,
)
from .ops import (
    add,
    backward,
    concatenate,
    conv1d,
    exp,
    forward,
    matmul,
    maxpool1d,
    mean_reduce,
    multiply,
    narrow,
    negate,
    registered_ops,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    square,
    sum_reduce,
)
from .optim import SGD, Adam, make_optimizer, optimizer_step
from .tensor import (
    Parameter,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    stop_gradient,
)

__all__ = [
    "Adam",
    "CheckpointError",
    "Parameter",
    "SGD",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "concatenate",
    "conv1d",
    "exp",
    "forward",
    "load_arrays",
    "load_parameters",
    "make_optimizer",
    "matmul",
    "maxpool1d",
    "mean_reduce",
    "multiply",
    "narrow",
    "negate",
    "optimizer_step",
    "registered_ops",
    "relu",
    "reshape",
    "save_arrays",
    "save_parameters",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "square",
    "stop_gradient",
    "sum_reduce",
]
