"""Exact reference quantities for univariate data on a uniform 2^n grid.

For such data the optimal denoiser is the posterior mean of a Gaussian
mixture, and expected losses reduce to one-dimensional Gaussian integrals
that Gauss-Hermite quadrature evaluates to near machine precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, logsumexp, roots_hermite

from pixdiff.errors import ConfigurationError, QuadratureError
from pixdiff.schedules import NoiseLevel

DEFAULT_NODES = 127
MAX_NODES = 127 * 32
CONVERGENCE_TOL = 1e-10  # target change on node doubling
FAIL_TOL = 1e-6          # change still above this at MAX_NODES -> QuadratureError
WINDOW_STD = 38.0        # posterior terms beyond this many stds are below exp(-722)
UNIVARIATE_BIAS = 10.7   # 1 + 2 log(128)


@dataclass(frozen=True)
class GridData:
    n_bits: int

    def __post_init__(self):
        if int(self.n_bits) != self.n_bits or self.n_bits < 1:
            raise ConfigurationError(f"n_bits must be a positive integer, got {self.n_bits}")

    @property
    def size(self) -> int:
        return 2 ** self.n_bits

    @property
    def support(self) -> np.ndarray:
        """``-1 + 2 i / (2^n - 1)``, endpoints included."""
        k = self.size
        return -1.0 + 2.0 * np.arange(k) / (k - 1)

    @property
    def spacing(self) -> float:
        return 2.0 / (self.size - 1)

    def variance(self) -> float:
        return float(np.mean(self.support ** 2))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.support[rng.integers(0, self.size, n)]


@dataclass(frozen=True)
class PrecisionMixture:
    components: tuple  # ((n_bits, proportion), ...)

    def __post_init__(self):
        comps = tuple((int(n), float(p)) for n, p in self.components)
        if not comps or any(p <= 0 for _, p in comps):
            raise ConfigurationError("mixture proportions must be positive")
        object.__setattr__(self, "components", comps)

    @classmethod
    def of(cls, bits: Sequence[int], proportions: Sequence[float]) -> "PrecisionMixture":
        if len(bits) != len(proportions):
            raise ConfigurationError("bits and proportions differ in length")
        return cls(tuple(zip(bits, proportions)))

    def weights(self) -> np.ndarray:
        p = np.array([p for _, p in self.components])
        return p / p.sum()


LOW_BIT_MIXTURE = PrecisionMixture.of([8, 7, 6, 5], [1, 4, 4, 6])


@dataclass(frozen=True)
class LossCurve:
    lambdas: np.ndarray
    values: np.ndarray
    nodes: np.ndarray | None = None  # quadrature nodes used per point

    def __post_init__(self):
        if self.lambdas.shape != self.values.shape:
            raise ValueError("lambdas and values differ in shape")
        if not np.all(np.isfinite(self.values)):
            raise QuadratureError("loss curve has non-finite values")


def _levels(lam):
    lam = np.asarray(lam, dtype=np.float64)
    return np.sqrt(expit(lam)), np.sqrt(expit(-lam))


def optimal_denoiser(data: GridData, z, level: NoiseLevel | float) -> np.ndarray:
    """``E[x | z]`` for ``z = alpha x + sigma eps`` and uniform grid ``x``; any array shape."""
    lam = level.lam if isinstance(level, NoiseLevel) else level
    alpha, sigma = _levels(lam)
    z = np.asarray(z, dtype=np.float64)
    xs = data.support
    a = np.reshape(alpha, alpha.shape + (1,) * (z.ndim - alpha.ndim)) if alpha.ndim else alpha
    s = np.reshape(sigma, sigma.shape + (1,) * (z.ndim - sigma.ndim)) if sigma.ndim else sigma
    out = np.empty(z.shape)
    flat_z = z.reshape(-1)
    a = np.broadcast_to(a, z.shape).reshape(-1)
    s = np.broadcast_to(s, z.shape).reshape(-1)
    step = max(1, (1 << 22) // xs.size)
    flat_out = out.reshape(-1)
    for i in range(0, flat_z.size, step):
        zz, aa, ss = flat_z[i:i + step, None], a[i:i + step, None], s[i:i + step, None]
        logit = -((zz - aa * xs) ** 2) / (2.0 * ss ** 2)
        p = np.exp(logit - logsumexp(logit, axis=1, keepdims=True))
        flat_out[i:i + step] = p @ xs
    return out


@lru_cache(maxsize=16)
def _hermite(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = roots_hermite(nodes)
    return math.sqrt(2.0) * x, w / math.sqrt(math.pi)


def _posterior_terms(data: GridData, lam: float, nodes: int):
    """Posterior weights over a window of grid offsets for every (source point, node)."""
    alpha, sigma = (float(v) for v in _levels(lam))
    xs = data.support
    k = data.size
    eps, w = _hermite(nodes)
    ratio = sigma / (alpha * data.spacing) if alpha > 0 else math.inf
    reach = (WINDOW_STD + float(np.max(np.abs(eps)))) * ratio
    if not math.isfinite(reach) or reach >= k - 1:
        j = np.broadcast_to(np.arange(k), (k, k))              # whole grid
    else:
        m = int(math.ceil(reach))
        j = np.arange(k)[:, None] + np.arange(-m, m + 1)[None, :]  # [K, W]
    valid = (j >= 0) & (j < k)
    xj = xs[np.clip(j, 0, k - 1)]                              # [K, W]
    # z - alpha x_j = alpha (x_i - x_j) + sigma eps
    # z - alpha x_j = alpha (x_i - x_j) + sigma eps
    diff = (alpha / sigma) * (xs[:, None] - xj)[:, None, :] + eps[None, :, None]  # [K, N, W], in sigma units
    logit = -0.5 * diff * diff
    if not valid.all():
        logit[np.broadcast_to(~valid[:, None, :], logit.shape)] = -np.inf
    logit -= logit.max(axis=2, keepdims=True)
    p = np.exp(logit, out=logit)
    p /= p.sum(axis=2, keepdims=True)
    return p, xj, w, alpha, sigma


def _x_sq_err(data: GridData, lam: float, nodes: int) -> float:
    """``E_x E_eps (x_hat - x)^2`` by Gauss-Hermite in eps."""
    p, xj, w, _, _ = _posterior_terms(data, lam, nodes)
    xs = data.support
    err = np.einsum("knw,kw->kn", p, xj - xs[:, None])  # x_hat - x_i
    return float(np.mean((err ** 2) @ w))


def _posterior_variance(data: GridData, lam: float, nodes: int) -> float:
    """``E_z Var[x | z]``: the same quantity through the law of total variance."""
    p, xj, w, _, _ = _posterior_terms(data, lam, nodes)
    mean = np.einsum("knw,kw->kn", p, xj)
    var = np.einsum("knw,knw->kn", p, (xj[:, None, :] - mean[:, :, None]) ** 2)
    return float(np.mean(var @ w))


def _converged(fn: Callable[[int], float], min_nodes: int, max_nodes: int, tol: float) -> tuple[float, int]:
    nodes = min_nodes
    prev = fn(nodes)
    change = math.inf
    while nodes * 2 <= max_nodes:
        nodes *= 2
        cur = fn(nodes)
        change = abs(cur - prev)
        prev = cur
        if change <= tol * max(1.0, abs(cur)):
            return cur, nodes
    if change > FAIL_TOL:
        raise QuadratureError(f"quadrature did not converge: change {change:.3g} at {nodes} nodes")
    return prev, nodes


def x_mse(data: GridData, lam: float, nodes: int = DEFAULT_NODES, adaptive: bool = True,
          max_nodes: int = MAX_NODES, tol: float = CONVERGENCE_TOL) -> tuple[float, int]:
    """Expected ``(x_hat - x)^2`` of the optimal denoiser, and the node count used."""
    fn = lambda m: _x_sq_err(data, lam, m)  # noqa: E731
    if not adaptive:
        return fn(nodes), nodes
    return _converged(fn, nodes, max_nodes, tol)


def posterior_variance(data: GridData, lam: float, nodes: int = DEFAULT_NODES) -> tuple[float, int]:
    return _converged(lambda m: _posterior_variance(data, lam, m), nodes, MAX_NODES, CONVERGENCE_TOL)


def _eps_point(data: GridData, lam: float, nodes: int, adaptive: bool, tol: float, max_nodes: int) -> tuple[float, int]:
    scale = math.exp(lam)
    fn = lambda m: scale * _x_sq_err(data, lam, m)  # noqa: E731  eps - eps_hat = alpha (x_hat - x) / sigma
    if not adaptive:
        return fn(nodes), nodes
    return _converged(fn, nodes, max_nodes, tol)


def eps_mse_curve(data: GridData, lambdas, nodes: int = DEFAULT_NODES, adaptive: bool = True,
                  tol: float = CONVERGENCE_TOL, max_nodes: int = MAX_NODES) -> LossCurve:
    """``E ||eps - eps_hat||^2`` of the optimal denoiser on a lambda grid.

    Starting from ``nodes``, the node count doubles until the value changes
    by less than ``tol``. Raises :class:`QuadratureError` if the change is
    still above 1e-6 at ``max_nodes``.
    """
    lam = np.asarray(lambdas, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(lam)):
        raise ConfigurationError("lambda grid must be finite")
    vals, used = np.empty(lam.shape), np.empty(lam.shape, dtype=np.int64)
    for i, l in enumerate(lam):
        vals[i], used[i] = _eps_point(data, float(l), nodes, adaptive, tol, max_nodes)
    return LossCurve(lam, vals, used)


def eps_mse_trapezoid(data: GridData, lam: float, points: int = 100_001, half_width: float = 8.0) -> float:
    """Brute-force cross-check: trapezoid rule in eps over ``[-half_width, half_width]``."""
    alpha, sigma = (float(v) for v in _levels(lam))
    eps = np.linspace(-half_width, half_width, points)
    pdf = np.exp(-0.5 * eps ** 2) / math.sqrt(2.0 * math.pi)
    total = 0.0
    for x in data.support:
        z = alpha * x + sigma * eps
        x_hat = optimal_denoiser(data, z, lam)
        eps_hat = (z - alpha * x_hat) / sigma
        total += np.trapezoid(pdf * (eps - eps_hat) ** 2, eps)
    return float(total / data.size)


def weighted_curve(data: GridData, lambdas, weight: Callable | None = None, bias: float = UNIVARIATE_BIAS,
                   base: LossCurve | None = None) -> LossCurve:
    """``w(lambda) * eps_mse(lambda)``; defaults to ``w = sigmoid(bias - lambda)``."""
    base = eps_mse_curve(data, lambdas) if base is None else base
    w = expit(bias - base.lambdas) if weight is None else np.asarray(weight(base.lambdas), dtype=np.float64)
    return LossCurve(base.lambdas, w * base.values, base.nodes)


def mixture_curve(mix: PrecisionMixture, lambdas, **kw) -> LossCurve:
    """Proportion-weighted eps-mse of per-precision optimal denoisers."""
    lam = np.asarray(lambdas, dtype=np.float64).reshape(-1)
    total = np.zeros(lam.shape)
    used = np.zeros(lam.shape, dtype=np.int64)
    for (bits, _), p in zip(mix.components, mix.weights()):
        c = eps_mse_curve(GridData(bits), lam, **kw)
        total += p * c.values
        used = np.maximum(used, c.nodes)
    return LossCurve(lam, total, used)


def curve_distance(a: LossCurve, b: LossCurve, normalize: bool = True) -> float:
    """L2 distance over the grid, optionally after scaling both curves to a maximum of one."""
    if not np.array_equal(a.lambdas, b.lambdas):
        raise ValueError("curves use different lambda grids")
    va, vb = a.values, b.values
    if normalize:
        va, vb = va / va.max(), vb / vb.max()
    return float(np.sqrt(np.trapezoid((va - vb) ** 2, a.lambdas)))


class OracleModel:
    """Optimal x-predictor for grid data, in the sampler's model interface."""

    def __init__(self, data: GridData):
        self.data = data

    def __call__(self, z, level: NoiseLevel, conditioning=None):
        from pixdiff.diffusion import Prediction

        z = np.asarray(z, dtype=np.float64)
        lam = np.asarray(level.lam, dtype=np.float64)
        if lam.ndim:
            lam = lam.reshape((-1,) + (1,) * (z.ndim - 1))
        return Prediction("x", optimal_denoiser(self.data, z, np.broadcast_to(lam, z.shape)), level, z)
