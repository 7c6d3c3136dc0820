"""Minimal reverse-mode autodiff on numpy plus the layers built on it."""

from .tensor import Tensor, custom_op, grad_enabled, no_grad

__all__ = ["Tensor", "custom_op", "grad_enabled", "no_grad"]
