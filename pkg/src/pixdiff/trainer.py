"""Desk-scale training loop: Adam with warmup, EMA weights and toy evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import wasserstein_distance

from pixdiff import uvit
from pixdiff.data import ToyDataset
from pixdiff.diffusion import NULL_LABEL, SamplerConfig, forward_sample, sample, x_from_v
from pixdiff.engine import checkpoint, ops
from pixdiff.engine.random import stream
from pixdiff.errors import ConfigurationError, TrainingError
from pixdiff.io import write_csv
from pixdiff.schedules import LogSnrSchedule
from pixdiff.weightings import WeightingSpec

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss", "grad_norm", "lr", "bias_t")

# RNG stream ids: (seed, _STEP, step, purpose), (seed, _INIT), (seed, _EVAL)
_STEP, _INIT, _EVAL = range(3)
_DATA, _TIME, _NOISE, _DROP, _DROPOUT = range(5)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2048
    learning_rate: float = 1e-4
    warmup_steps: int = 10_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-12
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    max_steps: int = 1_000_000
    weighting: WeightingSpec = field(default_factory=lambda: WeightingSpec("sigmoid", bias=-3.0))
    schedule: LogSnrSchedule = field(default_factory=LogSnrSchedule)
    label_drop_prob: float = 0.1
    seed: int = 0
    dataset: ToyDataset = field(default_factory=ToyDataset)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.max_steps < 0 or self.warmup_steps < 0:
            raise ConfigurationError("step counts must be non-negative")
        if self.warmup_steps > self.max_steps:
            raise ConfigurationError(f"warmup_steps {self.warmup_steps} exceeds max_steps {self.max_steps}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigurationError("ema_decay must lie in [0, 1)")
        if not 0.0 <= self.label_drop_prob <= 1.0:
            raise ConfigurationError("label_drop_prob must lie in [0, 1]")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if self.weight_decay != 0.0:
            raise ConfigurationError("weight decay is not supported")

    def lr_at(self, step: int) -> float:
        """Linear warmup to ``learning_rate`` over ``warmup_steps`` (step is 0-based)."""
        if self.warmup_steps == 0:
            return self.learning_rate
        return self.learning_rate * min(1.0, (step + 1) / self.warmup_steps)


def toy_config(**kw) -> TrainConfig:
    """Settings that train the 1-D toy model in about a thousand steps."""
    base = dict(
        batch_size=256,
        learning_rate=2e-3,
        warmup_steps=50,
        ema_decay=0.99,
        max_steps=1000,
        weighting=WeightingSpec("sigmoid", bias=0.0),
        schedule=LogSnrSchedule("cosine", logsnr_min=-10.0, logsnr_max=10.0, image_res=1),
        dataset=ToyDataset("two_gaussians_1d"),
    )
    base.update(kw)
    return TrainConfig(**base)


@dataclass
class TrainState:
    step: int
    params: dict
    ema: dict
    m: dict
    v: dict

    @classmethod
    def init(cls, model: uvit.ResidualUViT) -> "TrainState":
        params = {k: p.data.copy() for k, p in model.params.items()}
        return cls(
            step=0,
            params=params,
            ema={k: a.copy() for k, a in params.items()},
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.array(float(self.step))}
        for group in ("params", "ema", "m", "v"):
            for k, a in getattr(self, group).items():
                out[f"{group}/{k}"] = a
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "TrainState":
        groups: dict = {"params": {}, "ema": {}, "m": {}, "v": {}}
        for key, a in arrays.items():
            if key == "step":
                continue
            group, name = key.split("/", 1)
            groups[group][name] = a
        return cls(step=int(arrays["step"]), **groups)


@dataclass(frozen=True)
class StepMetrics:
    step: int
    loss: float
    grad_norm: float
    lr: float
    bias_t: float

    def row(self) -> tuple:
        return (self.step, self.loss, self.grad_norm, self.lr, self.bias_t)


def batch_for_step(cfg: TrainConfig, step: int) -> tuple[np.ndarray, np.ndarray]:
    return cfg.dataset.sample(cfg.batch_size, stream(cfg.seed, _STEP, step, _DATA))


def loss_and_grads(model: uvit.ResidualUViT, cfg: TrainConfig, params: dict, x, labels, step: int,
                   backward: bool = True):
    """Mean training loss at ``params`` and its gradient, plus the sampled t and lambda."""
    net = model.with_params(params, requires_grad=True)
    n = x.shape[0]
    t = stream(cfg.seed, _STEP, step, _TIME).uniform(0.0, 1.0, n)
    level = cfg.schedule.to_noise_level(t)
    z, _ = forward_sample(x, level, stream(cfg.seed, _STEP, step, _NOISE))
    if model.config.num_classes:
        drop = stream(cfg.seed, _STEP, step, _DROP).uniform(size=n) < cfg.label_drop_prob
        labels = np.where(drop, NULL_LABEL, labels)
    else:
        labels = None
    v = net.predict_v(z, level.lam, labels, rng=stream(cfg.seed, _STEP, step, _DROPOUT))
    x_hat = x_from_v(v, z, level)
    per_example = cfg.weighting.loss(x, x_hat, cfg.schedule, t, step)
    loss = ops.mean(per_example)
    if not backward:
        return float(loss.data), None, t, level.lam
    loss.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in net.params.items()}
    return float(loss.data), grads, t, level.lam


def train_step(model: uvit.ResidualUViT, cfg: TrainConfig, state: TrainState, batch=None) -> tuple[TrainState, StepMetrics]:
    """One Adam update with warmup; returns the new state (inputs are not modified)."""
    step = state.step
    x, labels = batch_for_step(cfg, step) if batch is None else batch
    loss, grads, t, lam = loss_and_grads(model, cfg, state.params, x, labels, step)
    grad_norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not (math.isfinite(loss) and math.isfinite(grad_norm)):
        raise TrainingError(
            f"non-finite loss {loss} at step {step}: grad_norm={grad_norm}, "
            f"t in [{t.min():.6g}, {t.max():.6g}], lambda in [{np.min(lam):.6g}, {np.max(lam):.6g}]"
        )
    lr = cfg.lr_at(step)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    k = step + 1
    c1, c2 = 1.0 - b1 ** k, 1.0 - b2 ** k
    d = cfg.ema_decay
    params, ema, m, v = {}, {}, {}, {}
    for name, p in state.params.items():
        g = grads[name]
        m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        params[name] = p - lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + cfg.adam_eps)
        # d * ema + (1 - d) * p, written so that ema == p stays exactly fixed
        ema[name] = state.ema[name] + (1.0 - d) * (params[name] - state.ema[name])
    new = TrainState(step + 1, params, ema, m, v)
    return new, StepMetrics(step, loss, grad_norm, lr, cfg.weighting.bias_at(step))


class Trainer:
    def __init__(self, model_config: uvit.UViTConfig, cfg: TrainConfig, state: TrainState | None = None):
        if tuple(cfg.dataset.shape[-1:]) != (model_config.in_channels,):
            raise ConfigurationError(
                f"dataset has {cfg.dataset.channels} channels, model expects {model_config.in_channels}"
            )
        self.cfg = cfg
        self.model = uvit.build(model_config, stream(cfg.seed, _INIT), requires_grad=False)
        self.state = TrainState.init(self.model) if state is None else state
        self.history: list[StepMetrics] = []

    def step(self, batch=None) -> StepMetrics:
        self.state, metrics = train_step(self.model, self.cfg, self.state, batch)
        self.history.append(metrics)
        return metrics

    def run(self, steps: int | None = None, log_every: int = 100) -> list[StepMetrics]:
        steps = self.cfg.max_steps - self.state.step if steps is None else steps
        start = time.perf_counter()
        for _ in range(steps):
            m = self.step()
            if log_every and (m.step + 1) % log_every == 0:
                log.info("step %d loss %.5g grad_norm %.3g (%.1fs)", m.step + 1, m.loss, m.grad_norm,
                         time.perf_counter() - start)
        return self.history

    def network(self, use_ema: bool = True) -> uvit.ResidualUViT:
        return self.model.with_params(self.state.ema if use_ema else self.state.params)

    def write_log(self, path) -> None:
        write_csv(path, LOG_COLUMNS, (m.row() for m in self.history))

    def save(self, path) -> None:
        checkpoint.save(path, self.state.to_arrays())

    def load(self, path) -> None:
        self.state = TrainState.from_arrays(checkpoint.load(path))


def eval_toy(model, cfg: TrainConfig, sampler: SamplerConfig | None = None, num_samples: int = 10_000) -> dict:
    """1-Wasserstein distance between generated and data samples (1-D datasets only)."""
    if num_samples <= 0:
        return {}
    ds = cfg.dataset
    if ds.kind not in ("two_gaussians_1d", "grid_bits_1d"):
        raise ConfigurationError(f"eval_toy supports 1-D datasets, not {ds.kind!r}")
    sampler = SamplerConfig(num_steps=256, seed=cfg.seed) if sampler is None else sampler
    generated = sample(model, cfg.schedule, sampler, shape=ds.shape, num_samples=num_samples).reshape(-1)
    reference, _ = ds.sample(num_samples, stream(cfg.seed, _EVAL))
    return {
        "w1": float(wasserstein_distance(generated, reference.reshape(-1))),
        "num_samples": num_samples,
        "sample_mean": float(np.mean(generated)),
        "sample_std": float(np.std(generated)),
    }


def toy_run(steps: int = 1000, seed: int = 0, num_samples: int = 10_000, **overrides) -> dict:
    """Train the 1-D toy model and compare its samples with the untrained model's."""
    cfg = toy_config(seed=seed, max_steps=max(steps, 50), **overrides)
    trainer = Trainer(uvit.toy_1d(), cfg)
    before = eval_toy(trainer.network(use_ema=False), cfg, num_samples=num_samples)
    trainer.run(steps)
    after = eval_toy(trainer.network(), cfg, num_samples=num_samples)
    return {"before": before, "after": after, "trainer": trainer}


__all__ = [
    "LOG_COLUMNS",
    "StepMetrics",
    "TrainConfig",
    "TrainState",
    "Trainer",
    "eval_toy",
    "loss_and_grads",
    "toy_config",
    "toy_run",
    "train_step",
    "replace",
]
