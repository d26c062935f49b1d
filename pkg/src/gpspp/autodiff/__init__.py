"""Minimal reverse-mode differentiation over numpy arrays."""

from . import ops
from .check import grad_check
from .rng import RngStream
from .store import load_params, save_params
from .tensor import Tensor, as_tensor, grad_enabled, no_grad, set_debug

__all__ = [
    "RngStream",
    "Tensor",
    "as_tensor",
    "grad_check",
    "grad_enabled",
    "load_params",
    "no_grad",
    "ops",
    "save_params",
    "set_debug",
]
