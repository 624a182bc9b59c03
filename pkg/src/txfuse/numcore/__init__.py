"""Numeric core: tensors, autodiff tape, Adam, and checkpoint files."""

from .checkpoint import file_sha256, load_arrays, save_arrays
from .optim import Adam
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    concat,
    cosine_rows,
    debug_checks,
    div,
    exp,
    gather_rows,
    layer_norm,
    log,
    log_softmax_rows,
    matmul,
    mul,
    narrow,
    pow_const,
    prelu,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scatter_add_rows,
    softmax_rows,
    sub,
    tanh,
    transpose,
    uniform_init,
)

__all__ = [
    "Adam",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "concat",
    "cosine_rows",
    "debug_checks",
    "div",
    "exp",
    "file_sha256",
    "gather_rows",
    "layer_norm",
    "load_arrays",
    "log",
    "log_softmax_rows",
    "matmul",
    "mul",
    "narrow",
    "pow_const",
    "prelu",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "save_arrays",
    "scatter_add_rows",
    "softmax_rows",
    "sub",
    "tanh",
    "transpose",
    "uniform_init",
]
