"""Differentiable float64 array substrate used by every model component."""
from . import functional, kernels
from .checkpoint import CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .functional import bilinear_sample, conv2d, index_add, linear, take_rows, upsample_nearest3d
from .gradcheck import GradCheckReport, finite_diff_grad_check
from .layers import Conv2d, LayerNorm, Linear, Module, param
from .optim import SGD, Adam, cosine_lr
from .tensor import (
    Tensor,
    as_tensor,
    clamp_min,
    concat,
    exp,
    gelu,
    layer_norm,
    log,
    log_softmax,
    no_grad,
    relu,
    softmax,
    stack,
    tanh,
    where,
)

__all__ = [
    "Adam",
    "CheckpointError",
    "Conv2d",
    "GradCheckReport",
    "LayerNorm",
    "Linear",
    "Module",
    "SGD",
    "Tensor",
    "as_tensor",
    "bilinear_sample",
    "clamp_min",
    "concat",
    "conv2d",
    "cosine_lr",
    "decode_checkpoint",
    "encode_checkpoint",
    "exp",
    "finite_diff_grad_check",
    "functional",
    "gelu",
    "index_add",
    "kernels",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "log",
    "log_softmax",
    "no_grad",
    "param",
    "relu",
    "save_checkpoint",
    "softmax",
    "stack",
    "take_rows",
    "tanh",
    "upsample_nearest3d",
    "where",
]
