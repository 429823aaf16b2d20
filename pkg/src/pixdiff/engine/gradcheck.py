"""Finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from pixdiff.engine.tensor import Tensor


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise ``|a - n| / (|n| + 1e-8)``."""
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    probe: np.ndarray | None = None,
) -> list[float]:
    """Compare autodiff and central-difference gradients of ``sum(probe * fn(*inputs))``.

    Returns one maximum relative error per input. A fixed random ``probe``
    turns vector-valued ops into a scalar objective with non-trivial
    upstream gradients.
    """
    out = fn(*inputs)
    if probe is None:
        probe = np.random.default_rng(1234).standard_normal(out.shape)
    for t in inputs:
        t.grad = None
    out.backward(probe)
    errors = []
    for t in inputs:
        def objective():
            return float(np.sum(probe * fn(*inputs).data))

        numeric = numerical_grad(objective, t.data, h)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errors.append(relative_error(analytic, numeric))
    return errors


def check_directional(
    loss: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    seed: int = 0,
) -> list[float]:
    """Per-tensor relative error of ``<grad, d>`` against a central difference along random ``d``.

    Cheap enough for whole models: two extra forward passes per tensor.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    out = loss()
    out.backward()
    errors = []
    for p in params:
        d = rng.standard_normal(p.shape)
        analytic = float(np.sum((p.grad if p.grad is not None else 0.0) * d))
        orig = p.data.copy()
        p.data[...] = orig + h * d
        fp = loss().item()
        p.data[...] = orig - h * d
        fm = loss().item()
        p.data[...] = orig
        numeric = (fp - fm) / (2.0 * h)
        errors.append(abs(analytic - numeric) / (abs(numeric) + 1e-8))
    return errors
