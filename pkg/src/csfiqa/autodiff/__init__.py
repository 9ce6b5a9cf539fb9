"""Minimal reverse-mode automatic differentiation over float64 numpy arrays."""

from . import ops
from .gradcheck import grad_check, gradient_errors, relative_error
from .tensor import Node, Parameter, Tape, Tensor, as_tensor, no_grad

__all__ = [
    "Node",
    "Parameter",
    "Tape",
    "Tensor",
    "as_tensor",
    "grad_check",
    "gradient_errors",
    "no_grad",
    "ops",
    "relative_error",
]
