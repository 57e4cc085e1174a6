"""Dense arrays, a reverse-mode tape and neural-network primitives."""

from .gradcheck import NonFiniteError, grad_check, param_grad_check
from .ops import (
    ShapeError,
    add,
    concat,
    conv2d,
    div,
    exp,
    fully_connected,
    getitem,
    maxpool2d,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    sqrt,
    square,
    sub,
    tanh,
    unbroadcast,
)
from .ops import sum as sum_  # noqa: F401
from .tensor import DEFAULT_DTYPE, Param, Tape, TapeError, Tensor, active_tape, backward, zero_grad

__all__ = [
    "DEFAULT_DTYPE", "NonFiniteError", "Param", "ShapeError", "Tape", "TapeError", "Tensor",
    "active_tape", "add", "backward", "concat", "conv2d", "div", "exp", "fully_connected", "getitem",
    "grad_check", "maxpool2d", "mean", "mul", "param_grad_check", "relu", "reshape",
    "sigmoid", "softmax", "softmax_cross_entropy", "sqrt", "square", "sub", "sum_", "tanh",
    "unbroadcast", "zero_grad",
]
