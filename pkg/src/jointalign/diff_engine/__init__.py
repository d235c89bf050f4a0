"""Dense-tensor compute layer with reverse-mode differentiation."""

from .checkpoint import CheckpointError, TrainState, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .ops import attention, bce_loss, l1_loss, layer_norm, linear
from .tensor import (
    GraphFreedError,
    NumericError,
    ShapeError,
    Tensor,
    abs_,
    add,
    backward,
    clip,
    concat,
    cos,
    div,
    exp,
    gelu,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    sigmoid,
    sin,
    softmax,
    sqrt,
    stack,
    sub,
    sum_,
    swapaxes,
    take,
    tanh,
)

__all__ = [
    "Tensor", "backward", "no_grad", "grad_check",
    "ShapeError", "GraphFreedError", "NumericError",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "sin", "cos",
    "tanh", "sigmoid", "relu", "gelu", "abs_", "clip", "sum_", "mean",
    "matmul", "reshape", "swapaxes", "take", "concat", "stack", "softmax",
    "linear", "layer_norm", "attention", "l1_loss", "bce_loss",
    "save_checkpoint", "load_checkpoint", "TrainState", "CheckpointError",
]
