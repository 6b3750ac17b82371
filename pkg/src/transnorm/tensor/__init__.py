"""Minimal float64 tensor kernel with tape-based reverse-mode gradients."""

from transnorm.tensor.core import GradTape, Tensor, active_tape, as_tensor, backward
from transnorm.tensor.gradcheck import fd_gradient, relative_error, sample_indices
from transnorm.tensor.nn import (
    BatchNormState,
    batch_norm,
    bilinear_upsample,
    conv2d,
    conv_transpose2d,
    global_avg_pool,
    layer_norm,
    max_pool2d,
)
from transnorm.tensor.ops import (
    add,
    concat,
    div,
    exp,
    gelu,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    permute,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
)
from transnorm.tensor.ops import max as reduce_max
from transnorm.tensor.ops import sum as reduce_sum

__all__ = [
    "BatchNormState", "GradTape", "Tensor", "active_tape", "add", "as_tensor", "backward",
    "batch_norm", "bilinear_upsample", "concat", "conv2d", "conv_transpose2d", "div", "exp",
    "fd_gradient", "gelu", "global_avg_pool", "layer_norm", "log", "log_softmax", "matmul",
    "max_pool2d", "mean", "mul", "neg", "permute", "reduce_max", "reduce_sum",
    "relative_error", "relu", "reshape", "sample_indices", "sigmoid", "softmax", "sub",
]
