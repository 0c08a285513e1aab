"""Minimal dense-tensor engine with tape-based reverse-mode autodiff."""
from .tensor import GraphError, Tensor, backward, is_grad_enabled, make_node, no_grad
from .ops import (
    abs,
    add,
    clamp,
    concat,
    div,
    dropout,
    exp,
    getitem,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    scalar_mul,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    sub,
    sum,
    transpose,
    unbroadcast,
)
from .spatial import conv2d, global_avg_pool2d, max_pool2d, nearest_upsample2d, upsample_nearest2d
from .gradcheck import gradcheck, numeric_grad, relative_error

__all__ = [
    "GraphError", "Tensor", "backward", "is_grad_enabled", "make_node", "no_grad",
    "abs", "add", "clamp", "concat", "div", "dropout", "exp", "getitem", "log", "log_softmax",
    "matmul", "mean", "mul", "neg", "power", "relu", "reshape", "scalar_mul", "sigmoid",
    "softmax", "softplus", "sqrt", "sub", "sum", "transpose", "unbroadcast",
    "conv2d", "global_avg_pool2d", "max_pool2d", "nearest_upsample2d", "upsample_nearest2d",
    "gradcheck", "numeric_grad", "relative_error",
]
