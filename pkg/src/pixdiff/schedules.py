"""Variance-preserving log-SNR schedules.

A schedule maps unit time ``t`` to the log signal-to-noise ratio
``lambda(t) = log(alpha_t^2 / sigma_t^2)``, with ``alpha_t = sqrt(sigmoid(lambda))``
and ``sigma_t = sqrt(sigmoid(-lambda))``. All schedules here are built on the
cosine form ``-2 log tan(a t + b)`` plus a resolution-dependent offset.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.special import expit

from pixdiff.errors import ConfigurationError, DomainError

ScheduleKind = Literal["cosine", "cosine_shifted", "cosine_interpolated"]

BISECTION_TOL = 1e-12
BISECTION_MAX_ITER = 200


@dataclass(frozen=True)
class NoiseLevel:
    """Noise level ``(t, lambda, alpha, sigma)``; fields may be scalars or arrays."""

    t: object
    lam: object
    alpha: object
    sigma: object

    @classmethod
    def from_logsnr(cls, lam, t=None) -> "NoiseLevel":
        lam = np.asarray(lam, dtype=np.float64)
        alpha = np.sqrt(expit(lam))
        sigma = np.sqrt(expit(-lam))
        if lam.ndim == 0:
            lam, alpha, sigma = float(lam), float(alpha), float(sigma)
        return cls(t=t, lam=lam, alpha=alpha, sigma=sigma)

    @classmethod
    def clean(cls) -> "NoiseLevel":
        """The noise-free limit ``lambda -> +inf``."""
        return cls(t=0.0, lam=math.inf, alpha=1.0, sigma=0.0)


@dataclass(frozen=True)
class LogSnrSchedule:
    kind: ScheduleKind = "cosine_interpolated"
    logsnr_min: float = -10.0
    logsnr_max: float = 10.0
    image_res: int = 512
    noise_res_low: int = 32
    noise_res_high: int = 512
    shift_res: int = 64
    lam_range: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("cosine", "cosine_shifted", "cosine_interpolated"):
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if not self.logsnr_min < self.logsnr_max:
            raise ConfigurationError("logsnr_min must be below logsnr_max")
        for name in ("image_res", "noise_res_low", "noise_res_high", "shift_res"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.kind == "cosine_interpolated" and self._offset_slope() >= 4.0 * self._a:
            # d(lambda_cos)/dt <= -4a everywhere, so the schedule stays decreasing
            # as long as the offset grows slower than that.
            raise ConfigurationError("interpolation offset makes the schedule non-monotonic")
        hi = float(self.logsnr(0.0))
        lo = float(self.logsnr(1.0))
        object.__setattr__(self, "lam_range", (lo, hi))

    @property
    def _b(self) -> float:
        return math.atan(math.exp(-0.5 * self.logsnr_max))

    @property
    def _a(self) -> float:
        return math.atan(math.exp(-0.5 * self.logsnr_min)) - self._b

    def _offsets(self) -> tuple[float, float]:
        """Log-SNR offsets at t=0 and t=1."""
        if self.kind == "cosine":
            return 0.0, 0.0
        if self.kind == "cosine_shifted":
            c = math.log(self.image_res) - math.log(self.shift_res)
            return c, c
        high = math.log(self.image_res) - math.log(self.noise_res_high)
        low = math.log(self.image_res) - math.log(self.noise_res_low)
        return high, low

    def _offset_slope(self) -> float:
        start, end = self._offsets()
        return end - start

    @staticmethod
    def _check_t(t):
        arr = np.asarray(t, dtype=np.float64)
        if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
            raise DomainError(f"t must lie in [0, 1], got {t!r}")
        return arr

    def logsnr(self, t):
        """``lambda(t)`` for scalar or array ``t`` in [0, 1]."""
        t = self._check_t(t)
        start, end = self._offsets()
        lam = -2.0 * np.log(np.tan(self._a * t + self._b)) + (1.0 - t) * start + t * end
        return float(lam) if lam.ndim == 0 else lam

    def dlogsnr_dt(self, t):
        """Analytic ``d lambda / dt``; endpoints are evaluated one ulp inside."""
        t = self._check_t(t)
        t = np.clip(t, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
        # d/dt -2 log tan(u) = -2a / (sin u cos u) = -4a / sin(2u)
        u = self._a * t + self._b
        d = -4.0 * self._a / np.sin(2.0 * u) + self._offset_slope()
        return float(d) if d.ndim == 0 else d

    def to_noise_level(self, t) -> NoiseLevel:
        return NoiseLevel.from_logsnr(self.logsnr(t), t=t)

    def invert(self, lam):
        """Unit time at which the schedule attains ``lam``."""
        lam = np.asarray(lam, dtype=np.float64)
        lo, hi = self.lam_range
        if np.any(~np.isfinite(lam)) or np.any(lam < lo) or np.any(lam > hi):
            raise DomainError(f"log-SNR {lam} outside attained range [{lo}, {hi}]")
        if self.kind == "cosine_interpolated":
            t = self._bisect(lam)
        else:
            start, _ = self._offsets()
            t = (np.arctan(np.exp(-0.5 * (lam - start))) - self._b) / self._a
            t = np.clip(t, 0.0, 1.0)
        return float(t) if t.ndim == 0 else t

    def _bisect(self, lam: np.ndarray) -> np.ndarray:
        left = np.zeros_like(lam)
        right = np.ones_like(lam)
        for _ in range(BISECTION_MAX_ITER):
            mid = 0.5 * (left + right)
            above = np.asarray(self.logsnr(mid)) > lam
            left = np.where(above, mid, left)
            right = np.where(above, right, mid)
            if np.all(right - left < BISECTION_TOL):
                break
        return 0.5 * (left + right)

    def table(self, points: int) -> np.ndarray:
        """Rows ``(t, lambda, alpha, sigma, dlambda_dt)`` on a uniform t grid."""
        t = np.linspace(0.0, 1.0, points)
        level = NoiseLevel.from_logsnr(np.atleast_1d(self.logsnr(t)))
        return np.column_stack([t, level.lam, level.alpha, level.sigma, np.atleast_1d(self.dlogsnr_dt(t))])


_NAMED = re.compile(r"^cosine_interpolated_low_(\d+)_high_(\d+)$")


def from_name(name: str, image_res: int) -> LogSnrSchedule:
    """Parse names such as ``'cosine_interpolated_low_32_high_512'``."""
    m = _NAMED.match(name)
    if m:
        return LogSnrSchedule("cosine_interpolated", image_res=image_res,
                              noise_res_low=int(m.group(1)), noise_res_high=int(m.group(2)))
    m = re.match(r"^cosine_shifted_(\d+)$", name)
    if m:
        return LogSnrSchedule("cosine_shifted", image_res=image_res, shift_res=int(m.group(1)))
    if name == "cosine":
        return LogSnrSchedule("cosine", image_res=image_res)
    raise ConfigurationError(f"unknown diffusion_schedule {name!r}")


def default_schedule(image_res: int) -> LogSnrSchedule:
    return LogSnrSchedule("cosine_interpolated", image_res=image_res, noise_res_low=32, noise_res_high=image_res)
