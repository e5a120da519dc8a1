"""Tape-based autodiff core: tensors, layers, optimizer, gradient checker."""

from .tensor import (
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    concat,
    cos,
    div,
    exp,
    finite_checks,
    finite_checks_enabled,
    getitem,
    log,
    matmul,
    mean,
    mul,
    neg,
    pow_const,
    relu,
    reshape,
    set_finite_checks,
    sigmoid,
    sin,
    softmax,
    softplus,
    sqrt,
    stack,
    sub,
    sum_,
    swapaxes,
    tanh,
    unbroadcast,
    where_const,
)
from .layers import (
    AttentionBlock,
    GRUCell,
    LayerNorm,
    Linear,
    MLP,
    ParamStore,
    fourier_features,
    masked_attention,
)
from .optim import Optimizer, OptimizerConfig, cosine_lr
from .check import grad_check

__all__ = [
    "Tensor", "as_tensor", "backward", "unbroadcast",
    "add", "sub", "mul", "div", "neg", "pow_const", "matmul",
    "relu", "tanh", "sigmoid", "exp", "log", "sqrt", "abs_", "cos", "sin",
    "softplus", "softmax", "where_const",
    "sum_", "mean", "reshape", "swapaxes", "concat", "stack", "getitem",
    "finite_checks", "finite_checks_enabled", "set_finite_checks",
    "ParamStore", "Linear", "MLP", "LayerNorm", "GRUCell",
    "AttentionBlock", "fourier_features", "masked_attention",
    "Optimizer", "OptimizerConfig", "cosine_lr",
    "grad_check",
]
