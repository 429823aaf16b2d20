"""Minimal dense tensor engine with reverse-mode autodiff."""

from pixdiff.engine import ops
from pixdiff.engine.tensor import (
    Node,
    Tape,
    Tensor,
    as_tensor,
    default_dtype,
    grad_enabled,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "Node",
    "Tape",
    "Tensor",
    "as_tensor",
    "default_dtype",
    "grad_enabled",
    "no_grad",
    "ops",
    "precision",
    "set_default_dtype",
]
