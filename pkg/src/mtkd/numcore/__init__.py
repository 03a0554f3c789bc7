"""Tensor arithmetic with tape-based reverse-mode differentiation."""
from . import ops
from .gradcheck import check_gradients, finite_diff_grad, relative_error
from .ops import (
    cross_entropy,
    layer_norm,
    matmul,
    mse,
    softmax,
    softmax_cross_entropy,
    softmax_rows,
)
from .optim import Adam, AdamState, adam_step, adam_update
from .rng import Rng
from .tensor import Tape, Tensor, as_tensor, backward

__all__ = [
    "Adam",
    "AdamState",
    "Rng",
    "Tape",
    "Tensor",
    "adam_step",
    "adam_update",
    "as_tensor",
    "backward",
    "check_gradients",
    "cross_entropy",
    "finite_diff_grad",
    "layer_norm",
    "matmul",
    "mse",
    "ops",
    "relative_error",
    "softmax",
    "softmax_cross_entropy",
    "softmax_rows",
]
