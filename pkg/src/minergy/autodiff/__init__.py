"""Reverse-mode autodiff with differentiable backward rules (see engine.py)."""

from .engine import (
    ContractViolation,
    GradRequest,
    Value,
    as_value,
    constant,
    get_precision,
    grad,
    make_rng,
    no_grad,
    precision,
    set_precision,
    zeros_like,
    active_dtype,
)
from .check import NonFiniteValue, finite_difference_check, relative_error
from .ops import (
    add,
    broadcast_to,
    clamp,
    concat,
    div,
    exp,
    gather_rows,
    log,
    logsumexp,
    masked_fill,
    matmul,
    mean,
    mul,
    narrow,
    neg,
    pow_const,
    reshape,
    scatter_rows,
    sigmoid,
    silu,
    slice_,
    smooth_l1,
    softmax,
    sqrt,
    square,
    sub,
    sum_,
    transpose,
    unslice,
)

__all__ = [
    "ContractViolation", "GradRequest", "NonFiniteValue", "Value",
    "active_dtype", "add", "as_value", "broadcast_to", "clamp", "concat",
    "constant", "div", "exp", "finite_difference_check", "gather_rows",
    "get_precision", "grad", "log", "logsumexp", "make_rng", "masked_fill",
    "matmul", "mean", "mul", "narrow", "neg", "no_grad", "pow_const",
    "precision", "relative_error", "reshape", "scatter_rows", "set_precision",
    "sigmoid", "silu", "slice_", "smooth_l1", "softmax", "sqrt", "square",
    "sub", "sum_", "transpose", "unslice", "zeros_like",
]
