"""Minimal reverse-mode autodiff engine used by both networks."""

from .checkpoint import load_checkpoint, save_checkpoint
from .ops import (
    BLSTMParams,
    LSTMParams,
    add,
    auc_poly_loss,
    bias_add,
    blstm_grid_sweep,
    blstm_layer,
    concat,
    constant,
    conv2d,
    conv3d,
    deconv3d,
    dense,
    expand_axis,
    fit_step_polynomial,
    gather_patches,
    lstm_sweep,
    max_pool,
    mean_all,
    mul,
    narrow,
    parameter,
    permute,
    relu,
    renet_block,
    reshape,
    scale,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    sub,
    sum_all,
    tanh,
)
from .optim import ParamStore, adam_step
from .tensor import (
    DEFAULT_DTYPE,
    NumericError,
    ShapeMismatchError,
    Tape,
    Tensor,
    backward,
)

__all__ = [
    "BLSTMParams",
    "LSTMParams",
    "DEFAULT_DTYPE",
    "NumericError",
    "ParamStore",
    "ShapeMismatchError",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "auc_poly_loss",
    "backward",
    "bias_add",
    "blstm_grid_sweep",
    "blstm_layer",
    "concat",
    "constant",
    "conv2d",
    "conv3d",
    "deconv3d",
    "dense",
    "expand_axis",
    "fit_step_polynomial",
    "gather_patches",
    "load_checkpoint",
    "lstm_sweep",
    "max_pool",
    "mean_all",
    "mul",
    "narrow",
    "parameter",
    "permute",
    "relu",
    "renet_block",
    "reshape",
    "save_checkpoint",
    "scale",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "sub",
    "sum_all",
    "tanh",
]
