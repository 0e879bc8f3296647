"""Differentiable numerical core for the segmentation network.

A small reverse-mode engine over numpy arrays: ops record themselves on
a tape as they run, ``Tensor.backward()`` replays the tape in reverse
topological order.  Training runs in float32; gradient checking builds
the same graphs in float64.
"""

from .tensor import Tensor, tensor5, no_grad
from .ops import (
    add,
    concat,
    concat_channel,
    conv3d,
    convlstm_cell,
    ConvLSTMParams,
    exp,
    flatten,
    flip,
    instance_norm,
    log,
    log_softmax_channel,
    mean_axes,
    mul,
    prelu,
    reshape,
    sigmoid,
    softmax_channel,
    spatial_dropout,
    sub,
    sum_axes,
    tanh,
    tconv3d,
    transpose,
    zero_stuff,
)
from .adam import AdamState, adam_init, adam_step
from .gradcheck import GradCheckReport, grad_check
from .checkpoint import load_archive, save_archive

__all__ = [
    "AdamState",
    "ConvLSTMParams",
    "GradCheckReport",
    "Tensor",
    "adam_init",
    "adam_step",
    "add",
    "concat",
    "concat_channel",
    "conv3d",
    "convlstm_cell",
    "exp",
    "flatten",
    "flip",
    "grad_check",
    "instance_norm",
    "load_archive",
    "log",
    "log_softmax_channel",
    "mean_axes",
    "mul",
    "no_grad",
    "prelu",
    "reshape",
    "save_archive",
    "sigmoid",
    "softmax_channel",
    "spatial_dropout",
    "sub",
    "sum_axes",
    "tanh",
    "tconv3d",
    "tensor5",
    "transpose",
    "zero_stuff",
]
