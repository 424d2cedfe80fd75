"""Differentiable-numerics core: tensors, tape, optimizer, gradcheck."""

from .gradcheck import GradReport, gradcheck
from .optim import AdamW, lr_exponential_step
from .params import ParamRegistry
from .tensor import (
    PRIMITIVE_KINDS,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy,
    div,
    dropout,
    flatten,
    gather_rows,
    layer_norm,
    leaky_relu,
    linear,
    matmul,
    maximum,
    mul,
    primitive_forward,
    relu,
    reshape,
    scaled_dot_product_attention,
    scatter_rows,
    segment_softmax,
    slice_axis,
    softmax,
    softplus,
    square,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "AdamW",
    "GradReport",
    "ParamRegistry",
    "PRIMITIVE_KINDS",
    "Tensor",
    "add",
    "backward",
    "concat",
    "cross_entropy",
    "div",
    "dropout",
    "flatten",
    "gather_rows",
    "gradcheck",
    "layer_norm",
    "leaky_relu",
    "linear",
    "lr_exponential_step",
    "matmul",
    "maximum",
    "mul",
    "primitive_forward",
    "relu",
    "reshape",
    "scaled_dot_product_attention",
    "scatter_rows",
    "segment_softmax",
    "slice_axis",
    "softmax",
    "softplus",
    "square",
    "tmean",
    "transpose",
    "tsum",
]
