"""Reverse-mode differentiation over dense numpy arrays."""

from featfield.diffengine.tensor import Tape, Tensor, active_tape, backward
from featfield.diffengine import ops
from featfield.diffengine.ops import (
    add, as_tensor, broadcast, concat, conv2d, cumsum, div, exp, l2_norm, log,
    matmul, mean, mul, neg, relu, reshape, sigmoid, slice, softplus, sparse_matmul,
    sqrt, square, sub, sum, transpose,
)
from featfield.diffengine.optim import Adam, AdamState, adam_step

__all__ = [
    "Tape", "Tensor", "active_tape", "backward", "ops", "Adam", "AdamState", "adam_step",
    "add", "as_tensor", "broadcast", "concat", "conv2d", "cumsum", "div", "exp", "l2_norm",
    "log", "matmul", "mean", "mul", "neg", "relu", "reshape", "sigmoid", "slice",
    "softplus", "sparse_matmul", "sqrt", "square", "sub", "sum", "transpose",
]
