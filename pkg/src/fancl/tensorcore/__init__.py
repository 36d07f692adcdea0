"""Minimal dense tensors with reverse-mode autodiff and Adam."""

from fancl.tensorcore.autodiff import (
    Node,
    Tape,
    Tensor,
    active_tape,
    backward,
    forward_op,
    grads_for,
    no_record,
    precision,
)
from fancl.tensorcore.gradcheck import grad_check
from fancl.tensorcore.kernels import REGISTRY, conv_out_extent
from fancl.tensorcore.ops import (
    BatchNormStats,
    add,
    batchnorm2d,
    bilinear_resize,
    concat,
    conv2d,
    global_avg_pool,
    l2_normalize,
    linear,
    logsumexp,
    matmul,
    mul,
    relu,
    scale,
    sigmoid,
    tsum,
)
from fancl.tensorcore.optim import AdamState, adam_step

__all__ = [
    "AdamState", "BatchNormStats", "Node", "REGISTRY", "Tape", "Tensor",
    "active_tape", "adam_step", "add", "backward", "batchnorm2d", "bilinear_resize",
    "concat", "conv2d", "conv_out_extent", "forward_op", "global_avg_pool",
    "grad_check", "grads_for", "l2_normalize", "linear", "logsumexp", "matmul",
    "mul", "no_record", "precision", "relu", "scale", "sigmoid", "tsum",
]
