from .nn import AdamState, BatchNormState, adam_step, glorot_uniform, make_rng
from .ops import (
    activation,
    add,
    batch_norm,
    clip,
    concat,
    conv3d,
    conv3d_transposed,
    conv_output_shape,
    dense,
    div,
    exp,
    global_pool,
    log,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    square,
    sub,
    transposed_output_shape,
)
from .ops import sum as reduce_sum
from .tensor import ShapeError, Tensor, as_tensor, grad

__all__ = [
    "AdamState", "BatchNormState", "ShapeError", "Tensor", "activation", "adam_step", "add",
    "as_tensor", "batch_norm", "clip", "concat", "conv3d", "conv3d_transposed",
    "conv_output_shape", "dense", "div", "exp", "global_pool", "glorot_uniform", "grad", "log",
    "make_rng", "mean", "mul", "neg", "reduce_sum", "relu", "reshape", "sigmoid", "square", "sub",
    "transposed_output_shape",
]
