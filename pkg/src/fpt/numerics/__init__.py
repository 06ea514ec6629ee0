"""Differentiable tensor primitives, the AdamW optimizer, and a gradient checker."""

from .gradcheck import finite_diff_check
from .optim import AdamW
from .tensor import (
    ShapeError,
    Tensor,
    add,
    broadcast_to,
    concat,
    cross_entropy,
    dropout,
    exp,
    gelu,
    layer_norm,
    log,
    matmul,
    mul,
    power,
    reduce_mean,
    reduce_sum,
    reshape,
    scaled_dot_attention,
    softmax,
    take,
    transpose,
)

__all__ = [
    "AdamW",
    "ShapeError",
    "Tensor",
    "add",
    "broadcast_to",
    "concat",
    "cross_entropy",
    "dropout",
    "exp",
    "finite_diff_check",
    "gelu",
    "layer_norm",
    "log",
    "matmul",
    "mul",
    "power",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "scaled_dot_attention",
    "softmax",
    "take",
    "transpose",
]
