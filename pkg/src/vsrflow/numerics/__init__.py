"""Tensor substrate: autodiff tensors, fused kernels and UMVT I/O."""
from . import kernels, umvt
from .tensor import (
    GradReport,
    Tensor,
    add,
    as_tensor,
    concat,
    default_dtype,
    gelu,
    getitem,
    grad_check,
    layer_norm,
    linear,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    precision,
    reshape,
    rope,
    set_default_dtype,
    silu,
    softmax,
    square,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "GradReport", "Tensor", "add", "as_tensor", "concat", "default_dtype", "gelu", "getitem",
    "grad_check", "kernels", "layer_norm", "linear", "matmul", "mean", "mse", "mul", "no_grad",
    "precision", "reshape", "rope", "set_default_dtype", "silu", "softmax", "square", "sub",
    "transpose", "tsum", "umvt",
]
