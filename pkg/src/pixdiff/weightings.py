"""Loss weightings over log-SNR and the training losses built on them.

Weights are expressed in epsilon space (``w_eps``) or x space
(``w_x = exp(lambda) * w_eps``), since ``||eps - eps_hat||^2 = exp(lambda) ||x - x_hat||^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Literal

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, roots_legendre

from pixdiff.engine import ops
from pixdiff.engine.tensor import Tensor, as_tensor
from pixdiff.errors import ConfigurationError, DimensionError
from pixdiff.haar import band_labels, haar_arrays, haar_arrays_inverse, low_pass_count
from pixdiff.schedules import LogSnrSchedule

WeightingKind = Literal["sigmoid", "edm", "edm_monotonic", "power"]

# EDM: ln(sigma) ~ N(-1.2, 1.2^2) and sigma_data = 0.5, rewritten over lambda = -2 ln(sigma).
EDM_MEAN = 2.4
EDM_STD = 2.4
EDM_SIGMA_DATA = 0.5

DEFAULT_BIAS = {128: 0.0, 256: -1.0, 512: -3.0}
BIAS_SHIFT_PER_DOUBLING = 2.0 * math.log(2.0)


def sigmoid_weight_eps(lam, b):
    """``sigmoid(b - lambda)``."""
    return expit(np.asarray(b, dtype=np.float64) - np.asarray(lam, dtype=np.float64))


def sigmoid_weight_x(lam, b):
    """``exp(b) * sigmoid(lambda - b)``, the x-space form of the sigmoid weighting."""
    b = np.asarray(b, dtype=np.float64)
    return np.exp(b) * expit(np.asarray(lam, dtype=np.float64) - b)


def _edm_log_eps(lam):
    lam = np.asarray(lam, dtype=np.float64)
    s2 = EDM_SIGMA_DATA ** 2
    log_density = -0.5 * ((lam - EDM_MEAN) / EDM_STD) ** 2 - math.log(EDM_STD * math.sqrt(2.0 * math.pi))
    return log_density + np.logaddexp(-lam, math.log(s2)) - math.log(s2)


@lru_cache(maxsize=None)
def edm_mode() -> float:
    """Argmax over lambda of the unshifted EDM epsilon-space weighting."""
    def dlog(lam):
        return -(lam - EDM_MEAN) / EDM_STD ** 2 - expit(-lam - math.log(EDM_SIGMA_DATA ** 2))

    return brentq(dlog, EDM_MEAN - 60.0, EDM_MEAN, xtol=1e-14)


def edm_weight(lam, variant: str = "original", shift: float = 0.0):
    """EDM weighting in epsilon space, translated by ``shift`` along lambda.

    ``original`` is the sampling density of lambda times the EDM loss weight.
    ``monotonic`` replaces it by ``max_{l' >= lambda} w(l')``: constant at the
    peak value for lambda below the mode, unchanged above it.
    """
    lam = np.asarray(lam, dtype=np.float64) - shift
    if variant == "original":
        return np.exp(_edm_log_eps(lam))
    if variant == "monotonic":
        # The weighting is unimodal, so the running max from the right is a clamp at the mode.
        return np.exp(_edm_log_eps(np.maximum(lam, edm_mode())))
    raise ConfigurationError(f"unknown EDM variant {variant!r}")


def edm_resolution_shift(image_res: int, base_res: int = 64) -> float:
    """Lambda translation that moves a weighting tuned at ``base_res`` to ``image_res``."""
    return -2.0 * math.log(image_res / base_res)


def time_shifted_bias(step, b_start: float, b_end: float, t_b: float) -> float:
    if t_b <= 0:
        raise ConfigurationError("t_b must be positive")
    return b_start + (b_end - b_start) * min(max(step, 0) / t_b, 1.0)


def suggest_bias(image_res: int, ref_res: int = 512, ref_bias: float = -3.0) -> float:
    """Shift ``ref_bias`` by ``2 log 2`` per doubling of resolution (lower for larger images)."""
    return ref_bias - BIAS_SHIFT_PER_DOUBLING * math.log2(image_res / ref_res)


def default_bias(image_res: int) -> float:
    return DEFAULT_BIAS.get(image_res, suggest_bias(image_res))


def _per_example(value, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise DimensionError(f"{name}: expected scalar or shape ({n},), got {arr.shape}")
    return arr


def _residual(x, x_hat: Tensor, op: str) -> Tensor:
    x = as_tensor(x)
    x_hat = as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"{op}: x {x.shape} and x_hat {x_hat.shape} differ")
    if x.ndim < 2:
        raise DimensionError(f"{op}: expected a batch [N, ...], got {x.shape}")
    return ops.sub(x_hat, x.detach())


def sigmoid_loss(x, x_hat: Tensor, sched: LogSnrSchedule, t, b) -> Tensor:
    """Per-example ``-0.5 * dlambda/dt * exp(b) * sigmoid(lambda - b) * mean((x - x_hat)^2)``."""
    r = _residual(x, x_hat, "sigmoid_loss")
    n = r.shape[0]
    t = _per_example(t, n, "t")
    b = _per_example(b, n, "b")
    weight = -0.5 * sched.dlogsnr_dt(t) * sigmoid_weight_x(sched.logsnr(t), b)
    mse = ops.mean(ops.square(r), axis=tuple(range(1, r.ndim)))
    return ops.scale_batch(mse, weight)


def edm_loss(x, x_hat: Tensor, sched: LogSnrSchedule, t, variant: str = "original", shift: float = 0.0) -> Tensor:
    """EDM counterpart of :func:`sigmoid_loss` with the same reduction."""
    r = _residual(x, x_hat, "edm_loss")
    t = _per_example(t, r.shape[0], "t")
    lam = np.asarray(sched.logsnr(t))
    weight = -0.5 * sched.dlogsnr_dt(t) * np.exp(lam) * edm_weight(lam, variant, shift)
    mse = ops.mean(ops.square(r), axis=tuple(range(1, r.ndim)))
    return ops.scale_batch(mse, weight)


def band_weights(lam, dlam_dt, b, levels: int) -> dict[str, np.ndarray]:
    """``sigmoid(lambda + log(2) l(s) - b) * (-dlambda/dt)`` for every band label."""
    lam = np.asarray(lam, dtype=np.float64)
    return {
        lab: expit(lam + math.log(2.0) * low_pass_count(lab) - b) * -np.asarray(dlam_dt)
        for lab in band_labels(levels)
    }


def power_loss(x, x_hat: Tensor, sched: LogSnrSchedule, t, b, levels: int) -> Tensor:
    """Per-example Haar power loss ``sum_s w_s ||s||^2`` of the residual ``x_hat - x``.

    Images are ``[N, H, W, C]``. The gradient uses the orthonormality of the
    transform: ``d/dI sum_s w_s ||s||^2 = W^T (2 w_s s)``.
    """
    r = _residual(x, x_hat, "power_loss")
    if r.ndim != 4:
        raise DimensionError(f"power_loss: expected [N, H, W, C], got {r.shape}")
    n = r.shape[0]
    t = _per_example(t, n, "t")
    b = _per_example(b, n, "b")
    bands = haar_arrays(r.data, levels)
    weights = band_weights(sched.logsnr(t), sched.dlogsnr_dt(t), b, levels)
    per_band = {lab: weights[lab][:, None, None, None] for lab in bands}
    loss = np.zeros(n)
    for lab, s in bands.items():
        loss += weights[lab] * np.sum(s * s, axis=(1, 2, 3))

    def backward(g):
        scaled = {lab: 2.0 * per_band[lab] * g[:, None, None, None] * s for lab, s in bands.items()}
        return (haar_arrays_inverse(scaled, levels),)

    return ops._result(loss, (r,), "power_loss", backward)


@dataclass(frozen=True)
class WeightingSpec:
    kind: WeightingKind = "sigmoid"
    bias: float = -3.0
    power_levels: int = 0
    time_shift: tuple | None = None  # (b_start, b_end, t_b)
    edm_shift: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sigmoid", "edm", "edm_monotonic", "power"):
            raise ConfigurationError(f"unknown weighting kind {self.kind!r}")
        if self.power_levels < 0:
            raise ConfigurationError("power_levels must be non-negative")
        if self.time_shift is not None:
            if len(self.time_shift) != 3 or self.time_shift[2] <= 0:
                raise ConfigurationError("time_shift must be (b_start, b_end, t_b) with t_b > 0")

    def bias_at(self, step: int = 0) -> float:
        if self.time_shift is None:
            return self.bias
        return time_shifted_bias(step, *self.time_shift)

    def eps_weight(self, lam, step: int = 0):
        if self.kind in ("sigmoid", "power"):
            return sigmoid_weight_eps(lam, self.bias_at(step))
        return edm_weight(lam, "original" if self.kind == "edm" else "monotonic", self.edm_shift)

    def x_weight(self, lam, step: int = 0):
        if self.kind in ("sigmoid", "power"):
            return sigmoid_weight_x(lam, self.bias_at(step))
        return np.exp(np.asarray(lam, dtype=np.float64)) * self.eps_weight(lam, step)

    def loss(self, x, x_hat: Tensor, sched: LogSnrSchedule, t, step: int = 0) -> Tensor:
        """Per-example training loss.

        The power loss is divided by ``2 * D`` (``D`` = elements per example)
        so that at zero levels it equals the sigmoid loss divided by ``exp(b)``.
        """
        b = self.bias_at(step)
        if self.kind == "sigmoid":
            return sigmoid_loss(x, x_hat, sched, t, b)
        if self.kind == "power":
            d = int(np.prod(x_hat.shape[1:]))
            return ops.scale(power_loss(x, x_hat, sched, t, b, self.power_levels), 0.5 / d)
        variant = "original" if self.kind == "edm" else "monotonic"
        return edm_loss(x, x_hat, sched, t, variant, self.edm_shift)


def parse_loss_type(text: str, **kwargs) -> WeightingSpec:
    """Parse ``'sigmoid:-3'``, ``'power:-3:2'``, ``'edm'`` or ``'edm_monotonic:<shift>'``."""
    parts = [p.strip() for p in str(text).split(":")]
    kind = parts[0]
    try:
        if kind == "sigmoid":
            return WeightingSpec("sigmoid", bias=float(parts[1]) if len(parts) > 1 else -3.0, **kwargs)
        if kind == "power":
            return WeightingSpec(
                "power",
                bias=float(parts[1]) if len(parts) > 1 else -3.0,
                power_levels=int(parts[2]) if len(parts) > 2 else 0,
                **kwargs,
            )
        if kind in ("edm", "edm_monotonic"):
            return WeightingSpec(kind, edm_shift=float(parts[1]) if len(parts) > 1 else 0.0, **kwargs)
    except ValueError as exc:
        raise ConfigurationError(f"malformed loss_type {text!r}: {exc}") from None
    raise ConfigurationError(f"unknown loss_type {text!r}")


def weighted_loss(
    sched: LogSnrSchedule,
    eps_weight: Callable,
    eps_mse: Callable,
    lam_window: tuple | None = None,
    nodes: int = 512,
) -> float:
    """``int -dlambda/dt * w(lambda_t) * mse(lambda_t) dt`` by Gauss-Legendre in t.

    With ``lam_window=(lo, hi)`` only times whose log-SNR lies in the window
    contribute, which makes the value comparable across schedules.
    """
    lo, hi = sched.lam_range
    if lam_window is not None:
        lo, hi = max(lo, lam_window[0]), min(hi, lam_window[1])
        if not lo < hi:
            return 0.0
    t0, t1 = sched.invert(hi), sched.invert(lo)
    x, w = roots_legendre(nodes)
    t = 0.5 * (t1 - t0) * x + 0.5 * (t1 + t0)
    lam = sched.logsnr(t)
    f = -sched.dlogsnr_dt(t) * eps_weight(lam) * eps_mse(lam)
    return float(0.5 * (t1 - t0) * np.dot(w, f))


def weighting_table(lam, bias: float = -3.0, edm_shift: float = 0.0, normalize: bool = False) -> dict[str, np.ndarray]:
    """Epsilon- and x-space weights per kind on a lambda grid."""
    lam = np.asarray(lam, dtype=np.float64)
    cols = {
        "sigmoid_eps": sigmoid_weight_eps(lam, bias),
        "sigmoid_x": sigmoid_weight_x(lam, bias),
        "edm_eps": edm_weight(lam, "original", edm_shift),
        "edm_x": np.exp(lam) * edm_weight(lam, "original", edm_shift),
        "edm_monotonic_eps": edm_weight(lam, "monotonic", edm_shift),
        "edm_monotonic_x": np.exp(lam) * edm_weight(lam, "monotonic", edm_shift),
    }
    if normalize:
        cols = {k: v / np.max(v) for k, v in cols.items()}
    return {"lambda": lam, **cols}
