"""Forward process, denoising posterior and the ancestral (DDPM) sampler.

With ``z = alpha x + sigma eps`` and ``v = alpha eps - sigma x``::

    x = alpha z - sigma v        eps = sigma z + alpha v
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Literal

import numpy as np

from pixdiff.engine.random import stream
from pixdiff.engine.tensor import Tensor
from pixdiff.errors import ConfigurationError, DimensionError, OrderingError
from pixdiff.schedules import LogSnrSchedule, NoiseLevel

Space = Literal["x", "eps", "v"]
SPACES = ("x", "eps", "v")

T_MIN = 1e-4
DEFAULT_GAMMA = 0.3
NULL_LABEL = -1


def _coef(value, like: np.ndarray) -> np.ndarray:
    """Broadcast a scalar or per-example coefficient against a batch array."""
    c = np.asarray(value, dtype=np.float64)
    if c.ndim == 0:
        return c
    if c.shape[0] != like.shape[0]:
        raise DimensionError(f"per-example coefficient of length {c.shape[0]} for batch {like.shape[0]}")
    return c.reshape((-1,) + (1,) * (like.ndim - 1))


def _array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)


def convert(value, z, level: NoiseLevel, src: Space, dst: Space) -> np.ndarray:
    """Re-express a prediction made from ``z`` at ``level`` in another space."""
    if src not in SPACES or dst not in SPACES:
        raise ConfigurationError(f"unknown prediction space {src!r} -> {dst!r}")
    value, z = _array(value), _array(z)
    if value.shape != z.shape:
        raise DimensionError(f"prediction {value.shape} does not match z {z.shape}")
    if src == dst:
        return value
    a, s = _coef(level.alpha, z), _coef(level.sigma, z)
    if src == "v":
        x = a * z - s * value
    elif src == "eps":
        x = (z - s * value) / a
    else:
        x = value
    if dst == "x":
        return x
    if dst == "eps":
        if src == "v":
            return s * z + a * value
        return (z - a * x) / s
    # dst == "v"
    if src == "eps":
        return a * value - s * x
    return (a * z - x) / s


@dataclass(frozen=True)
class Prediction:
    space: Space
    value: np.ndarray
    level: NoiseLevel
    z: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.space not in SPACES:
            raise ConfigurationError(f"unknown prediction space {self.space!r}")

    def to(self, space: Space, z=None) -> "Prediction":
        z = self.z if z is None else z
        if z is None and space != self.space:
            raise ConfigurationError("conversion needs the noisy input z")
        return Prediction(space, convert(self.value, z, self.level, self.space, space), self.level, z)

    def x(self, z=None) -> np.ndarray:
        return self.to("x", z).value

    def eps(self, z=None) -> np.ndarray:
        return self.to("eps", z).value

    def v(self, z=None) -> np.ndarray:
        return self.to("v", z).value


def forward_sample(x, level: NoiseLevel, rng: np.random.Generator):
    """``z = alpha x + sigma eps`` with fresh standard-normal ``eps``; returns ``(z, eps)``."""
    arr = _array(x)
    eps = rng.standard_normal(arr.shape)
    z = _coef(level.alpha, arr) * arr + _coef(level.sigma, arr) * eps
    if isinstance(x, Tensor):
        return Tensor._wrap(z, False), Tensor._wrap(eps, False)
    return z, eps


@dataclass(frozen=True)
class Posterior:
    mean: np.ndarray
    sigma_small: np.ndarray  # sigma_{t->s}
    sigma_large: np.ndarray  # sigma_{t|s}

    def step_std(self, gamma: float) -> np.ndarray:
        """``sigma_small^gamma * sigma_large^(1 - gamma)``, evaluated in log space."""
        if not 0.0 <= gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {gamma}")
        if gamma == 1.0:
            return self.sigma_small
        if gamma == 0.0:
            return self.sigma_large
        with np.errstate(divide="ignore"):
            return np.exp(gamma * np.log(self.sigma_small) + (1.0 - gamma) * np.log(self.sigma_large))


def _transition(level_s: NoiseLevel, level_t: NoiseLevel):
    lam_s = np.asarray(level_s.lam, dtype=np.float64)
    lam_t = np.asarray(level_t.lam, dtype=np.float64)
    if np.any(~(lam_s > lam_t)):
        raise OrderingError(f"need lambda_s > lambda_t, got {level_s.lam} <= {level_t.lam}")
    # 1 - exp(lambda_t - lambda_s) without cancellation; equals 1 when s is clean.
    one_minus = -np.expm1(lam_t - lam_s)
    a_s, s_s = np.asarray(level_s.alpha, float), np.asarray(level_s.sigma, float)
    a_t, s_t = np.asarray(level_t.alpha, float), np.asarray(level_t.sigma, float)
    alpha_ts = a_t / a_s
    var_ts = s_t ** 2 * one_minus            # sigma^2_{t|s}
    var_small = s_s ** 2 * one_minus         # sigma^2_{t->s} = (1/s_s^2 + a_ts^2/var_ts)^-1
    coef_z = alpha_ts * s_s ** 2 / s_t ** 2  # var_small * alpha_ts / var_ts
    coef_x = a_s * one_minus                 # var_small * a_s / s_s^2
    return coef_z, coef_x, var_small, var_ts


def posterior_params(level_s: NoiseLevel, level_t: NoiseLevel, z_t, x_hat) -> Posterior:
    """Mean and both standard deviations of ``q(z_s | z_t, x = x_hat)``."""
    z_t, x_hat = _array(z_t), _array(x_hat)
    coef_z, coef_x, var_small, var_ts = _transition(level_s, level_t)
    mean = _coef(coef_z, z_t) * z_t + _coef(coef_x, z_t) * x_hat
    return Posterior(mean, np.sqrt(var_small), np.sqrt(var_ts))


def ancestral_step(z_t, x_hat, level_s: NoiseLevel, level_t: NoiseLevel, gamma: float, rng=None, noise=None):
    """One DDPM step ``z_s = mu + std * eps'``. Pass ``noise`` to supply ``eps'`` directly."""
    post = posterior_params(level_s, level_t, z_t, x_hat)
    if noise is None:
        noise = rng.standard_normal(post.mean.shape)
    return post.mean + _coef(post.step_std(gamma), post.mean) * noise


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 512
    gamma: float = DEFAULT_GAMMA
    guidance_scale: float = 0.0
    guidance_interval: tuple = (-3.0, 5.0)
    clip_x: Literal["none", "static"] = "static"
    seed: int = 0
    guidance_space: Space = "x"
    t_min: float = T_MIN

    def __post_init__(self):
        if int(self.num_steps) != self.num_steps or self.num_steps < 1:
            raise ConfigurationError("num_steps must be a positive integer")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]")
        if self.guidance_scale < 0:
            raise ConfigurationError("guidance_scale must be non-negative")
        lo, hi = self.guidance_interval
        if lo > hi:
            raise ConfigurationError(f"guidance interval ({lo}, {hi}) has lo > hi")
        if self.clip_x not in ("none", "static"):
            raise ConfigurationError(f"unknown clip_x {self.clip_x!r}")
        if self.guidance_space not in SPACES:
            raise ConfigurationError(f"unknown guidance_space {self.guidance_space!r}")
        if not 0.0 <= self.t_min < 1.0:
            raise ConfigurationError("t_min must lie in [0, 1)")

    def time_grid(self) -> np.ndarray:
        """Model evaluation times, from ``t=1`` down; the chain ends at the clean level."""
        i = np.arange(self.num_steps, 0, -1)
        return self.t_min + (1.0 - self.t_min) * i / self.num_steps


def in_interval(lam, interval) -> bool | np.ndarray:
    """Closed-interval membership; ``lo == hi`` is the empty interval."""
    lo, hi = interval
    lam = np.asarray(lam)
    inside = (lam >= lo) & (lam <= hi) & (lo < hi)
    return bool(inside) if inside.ndim == 0 else inside


def guided_prediction(cond: Prediction, uncond: Prediction, g: float, interval, level: NoiseLevel | None = None) -> Prediction:
    """``cond + g (cond - uncond)`` where lambda is inside ``interval``; ``cond`` elsewhere."""
    if cond.space != uncond.space:
        raise ConfigurationError(f"cannot mix {cond.space} and {uncond.space} predictions")
    level = cond.level if level is None else level
    c, u = _array(cond.value), _array(uncond.value)
    if c.shape != u.shape:
        raise DimensionError(f"guidance shapes {c.shape} and {u.shape} differ")
    if g == 0:
        return cond
    mask = np.asarray(in_interval(level.lam, interval), dtype=bool)
    if not mask.any():
        return cond
    guided = c + g * (c - u)
    if mask.ndim:
        guided = np.where(mask.reshape((-1,) + (1,) * (c.ndim - 1)), guided, c)
    return replace(cond, value=guided)


Model = Callable[..., Prediction]


def _call_model(model: Model, z: np.ndarray, level: NoiseLevel, conditioning) -> Prediction:
    pred = model(z, level, conditioning)
    if not isinstance(pred, Prediction):
        raise ConfigurationError("model must return a Prediction")
    if _array(pred.value).shape != z.shape:
        raise DimensionError(f"model output {np.shape(pred.value)} does not match z {z.shape}")
    return pred


def sample(
    model: Model,
    sched: LogSnrSchedule,
    cfg: SamplerConfig,
    conditioning=None,
    shape: tuple | None = None,
    num_samples: int | None = None,
    callback: Callable | None = None,
    chunk_elements: int = 1 << 22,
    start_index: int = 0,
) -> np.ndarray:
    """Draw samples of per-example ``shape``.

    Example ``i`` uses the RNG stream ``(seed, start_index + i)`` for its
    initial noise and every step, so results do not depend on chunking.
    ``conditioning`` is an array of class labels (``-1`` = unconditional) or
    None. ``callback(step, t, level, z)`` sees ``z`` before each model call.
    """
    if shape is None:
        raise ConfigurationError("sample() needs the per-example shape")
    shape = tuple(int(d) for d in shape)
    if conditioning is not None:
        conditioning = np.asarray(conditioning, dtype=np.int64)
        if num_samples is None:
            num_samples = conditioning.shape[0]
        elif conditioning.shape != (num_samples,):
            raise DimensionError("conditioning must hold one label per sample")
    if num_samples is None or num_samples < 1:
        raise ConfigurationError("num_samples must be a positive integer")
    per_example = cfg.num_steps * int(np.prod(shape))
    chunk = max(1, chunk_elements // per_example)
    out = np.empty((num_samples,) + shape)
    for start in range(0, num_samples, chunk):
        stop = min(num_samples, start + chunk)
        cond = None if conditioning is None else conditioning[start:stop]
        out[start:stop] = _sample_chunk(
            model, sched, cfg, cond, shape, range(start_index + start, start_index + stop), callback
        )
    return out


def _sample_chunk(model, sched, cfg: SamplerConfig, cond, shape, indices, callback) -> np.ndarray:
    # noise[:, 0] is the starting point z_1; noise[:, k] drives step k.
    noise = np.stack([stream(cfg.seed, i).standard_normal((cfg.num_steps,) + shape) for i in indices])
    z = noise[:, 0]
    grid = cfg.time_grid()
    guide = cfg.guidance_scale > 0 and cond is not None
    null = None if cond is None else np.full_like(cond, NULL_LABEL)
    for k, t in enumerate(grid):
        level = sched.to_noise_level(float(t))
        if callback is not None:
            callback(k, float(t), level, z)
        pred = _call_model(model, z, level, cond)
        if guide and in_interval(level.lam, cfg.guidance_interval):
            uncond = _call_model(model, z, level, null)
            space = cfg.guidance_space
            pred = guided_prediction(pred.to(space, z), uncond.to(space, z), cfg.guidance_scale, cfg.guidance_interval, level)
        x_hat = pred.x(z)
        if cfg.clip_x == "static":
            x_hat = np.clip(x_hat, -1.0, 1.0)
        if k == len(grid) - 1:
            return x_hat
        level_s = sched.to_noise_level(float(grid[k + 1]))
        z = ancestral_step(z, x_hat, level_s, level, cfg.gamma, noise=noise[:, k + 1])
    raise AssertionError("unreachable")


def sidecar(cfg: SamplerConfig, sched: LogSnrSchedule, **extra) -> dict:
    """Metadata written next to sampled images."""
    return {
        "seed": cfg.seed,
        "num_steps": cfg.num_steps,
        "sampler": {
            "type": "ddpm",
            "gamma": cfg.gamma,
            "guidance_scale": cfg.guidance_scale,
            "guidance_interval": list(cfg.guidance_interval),
            "guidance_space": cfg.guidance_space,
            "clip_x": cfg.clip_x,
            "t_min": cfg.t_min,
        },
        "schedule": {
            "kind": sched.kind,
            "logsnr_min": sched.logsnr_min,
            "logsnr_max": sched.logsnr_max,
            "image_res": sched.image_res,
            "noise_res_low": sched.noise_res_low,
            "noise_res_high": sched.noise_res_high,
            "shift_res": sched.shift_res,
        },
        **extra,
    }


def gaussian_oracle(z, level: NoiseLevel, conditioning=None) -> Prediction:
    """Optimal x-prediction for unit-variance Gaussian data: ``x_hat = alpha z``."""
    return Prediction("x", _coef(level.alpha, z) * z, level, z)


def binary_oracle(z, level: NoiseLevel, conditioning=None) -> Prediction:
    """Optimal x-prediction for data uniform on ``{-1, +1}``: ``tanh(alpha z / sigma^2)``."""
    a, s = _coef(level.alpha, z), _coef(level.sigma, z)
    return Prediction("x", np.tanh(a * z / s ** 2), level, z)


def x_from_v(v: Tensor, z, level: NoiseLevel) -> Tensor:
    """Differentiable ``x_hat = alpha z - sigma v_hat`` for per-example levels."""
    from pixdiff.engine import ops

    z = _array(z)
    alpha = np.broadcast_to(np.asarray(level.alpha, float), (z.shape[0],))
    sigma = np.broadcast_to(np.asarray(level.sigma, float), (z.shape[0],))
    az = Tensor._wrap(_coef(alpha, z) * z, False)
    return ops.add(ops.scale_batch(v, -sigma), az)


__all__ = [
    "Posterior",
    "Prediction",
    "SamplerConfig",
    "ancestral_step",
    "binary_oracle",
    "convert",
    "forward_sample",
    "gaussian_oracle",
    "guided_prediction",
    "in_interval",
    "posterior_params",
    "sample",
    "sidecar",
    "x_from_v",
]
