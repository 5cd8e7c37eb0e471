"""Tensor arithmetic with reverse-mode automatic differentiation."""

from .functional import avg_pool2d, conv2d, l2_normalize, layer_norm, log_softmax, softmax
from .gradcheck import gradient_check
from .tensor import (
    DEFAULT_DTYPE,
    Node,
    Tape,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    clamp_min,
    concat,
    div,
    exp,
    gelu,
    getitem,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    sqrt,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "add",
    "as_tensor",
    "avg_pool2d",
    "backward",
    "broadcast_to",
    "clamp_min",
    "concat",
    "conv2d",
    "DEFAULT_DTYPE",
    "div",
    "exp",
    "gelu",
    "getitem",
    "gradient_check",
    "is_grad_enabled",
    "l2_normalize",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "Node",
    "power",
    "relu",
    "reshape",
    "softmax",
    "sqrt",
    "stack",
    "sub",
    "tanh",
    "Tape",
    "Tensor",
    "transpose",
    "tsum",
]


def backward(loss: Tensor) -> None:
    """Functional spelling of ``loss.backward()``."""
    loss.backward()
