from tide.numerics.tensor import (
    Tensor,
    as_tensor,
    backward,
    bilinear_sample,
    concat,
    layer_norm,
    matmul,
    no_grad,
    softmax,
)
from tide.numerics.nn import Module, Parameter, multi_head_attention

__all__ = [
    "Tensor",
    "Parameter",
    "Module",
    "as_tensor",
    "backward",
    "bilinear_sample",
    "concat",
    "layer_norm",
    "matmul",
    "multi_head_attention",
    "no_grad",
    "softmax",
]
