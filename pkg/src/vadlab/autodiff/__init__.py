"""Minimal reverse-mode autodiff engine backing the training pipelines."""

from .gradcheck import GradCheckReport, gradcheck
from .init import constant, he_normal, make_rng
from .ops import (
    add,
    batch_norm2d,
    concat,
    conv2d,
    dense,
    global_avg_pool,
    matmul,
    max_pool2,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    softmax_cross_entropy,
    softmax_np,
    sub,
    transpose,
)
from .ops import sum as tensor_sum
from .optim import SgdState, sgd_step
from .tensor import (
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    no_grad,
    precision,
    set_default_dtype,
    zero_grad,
)

__all__ = [
    "GradCheckReport", "SgdState", "Tensor", "add", "as_tensor", "backward", "batch_norm2d",
    "concat", "constant", "conv2d", "default_dtype", "dense", "global_avg_pool", "gradcheck",
    "he_normal", "make_rng", "matmul", "max_pool2", "mean", "mul", "no_grad", "precision",
    "relu", "reshape", "set_default_dtype", "sgd_step", "softmax", "softmax_cross_entropy",
    "softmax_np", "sub", "tensor_sum", "transpose", "zero_grad",
]
