"""Minimal numpy tensor library with reverse-mode autodiff."""

from .ops import (
    BN_EPS,
    BN_MOMENTUM,
    activation,
    adaptive_maxpool2d,
    batchnorm2d,
    conv2d,
    conv2d_transpose,
    dense,
    maxpool2d,
    mse,
    relu,
    softmax_cross_entropy,
    tanh,
)
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    checked_mode,
    default_dtype,
    flatten,
    get_default_dtype,
    make_op,
    no_grad,
    reshape,
)

__all__ = [
    "BN_EPS", "BN_MOMENTUM", "NonFiniteError", "ShapeError", "Tensor",
    "activation", "adaptive_maxpool2d", "backward", "batchnorm2d", "checked_mode",
    "conv2d", "conv2d_transpose", "default_dtype", "dense", "flatten",
    "get_default_dtype", "make_op", "maxpool2d", "mse", "no_grad", "relu",
    "reshape", "softmax_cross_entropy", "tanh",
]
