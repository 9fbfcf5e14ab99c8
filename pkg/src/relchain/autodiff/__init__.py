"""Minimal reverse-mode autodiff over numpy float64 arrays."""

from relchain.autodiff import ops
from relchain.autodiff.nn import Module
from relchain.autodiff.optim import SGD, Adam, MissingGradError, clip_grad_norm, make_optimizer
from relchain.autodiff.tensor import (
    Parameter,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    grad,
    no_grad,
)

__all__ = [
    "Adam", "MissingGradError", "Module", "Parameter", "SGD", "ShapeError", "Tape", "TapeError",
    "Tensor", "as_tensor", "backward", "clip_grad_norm", "current_tape", "grad", "make_optimizer",
    "no_grad", "ops",
]
