"""Residual U-ViT denoiser.

Each level ``k`` runs ``f_d`` (down blocks), hands ``D(h)`` to the next level
and recombines with a single skip::

    out_k = f_u(U(inner(D(h)) - D(h)) + h),   h = f_d(x)

where ``D`` is average pooling followed by a bias-free linear and ``U`` a
bias-free linear followed by nearest upsampling. The deepest level runs the
mid blocks instead. Every block's last layer starts at zero, so a freshly
built network is the identity between input and output projections.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from pixdiff.diffusion import Prediction
from pixdiff.engine import ops
from pixdiff.engine.tensor import Tensor, no_grad
from pixdiff.errors import ConfigurationError, DimensionError
from pixdiff.schedules import NoiseLevel

BLOCK_TYPES = ("ResBlock", "Transformer")
BYTES_PER_ELEMENT = 2


@dataclass(frozen=True)
class UViTConfig:
    channels: tuple = (128, 256, 512, 1024)
    num_down_blocks: tuple = (3, 3, 3)
    num_up_blocks: tuple = (3, 3, 3)
    num_mid_blocks: int = 16
    block_type: tuple = ("ResBlock", "ResBlock", "Transformer", "Transformer")
    block_dropout: tuple = (0.0, 0.0, 0.1, 0.1)
    patch_size: int = 4
    in_channels: int = 3
    num_classes: int = 1000  # 0 disables class conditioning
    cond_dim: int | None = None  # defaults to 4 * channels[0]
    head_dim: int = 64
    mlp_ratio: int = 4
    skip: str = "residual"  # or "blockwise"
    prediction_space: str = "v"

    def __post_init__(self):
        for name in ("channels", "num_down_blocks", "num_up_blocks", "block_type", "block_dropout"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        n = len(self.channels)
        if n < 1:
            raise ConfigurationError("channels must name at least one level")
        if len(self.block_type) != n or len(self.block_dropout) != n:
            raise ConfigurationError("channels, block_type and block_dropout must have equal length")
        if len(self.num_down_blocks) != n - 1 or len(self.num_up_blocks) != n - 1:
            raise ConfigurationError("num_down_blocks/num_up_blocks need len(channels) - 1 entries")
        if any(c <= 0 for c in self.channels):
            raise ConfigurationError("channels must be positive")
        if any(b < 0 for b in self.num_down_blocks + self.num_up_blocks) or self.num_mid_blocks < 0:
            raise ConfigurationError("block counts must be non-negative")
        for t, c in zip(self.block_type, self.channels):
            if t not in BLOCK_TYPES:
                raise ConfigurationError(f"unknown block_type {t!r}")
            if t == "Transformer" and (c % 4 or c % self.num_heads(c)):
                raise ConfigurationError(f"Transformer level with {c} channels needs a multiple of 4")
        if any(not 0.0 <= p < 1.0 for p in self.block_dropout):
            raise ConfigurationError("block_dropout entries must lie in [0, 1)")
        if self.patch_size not in (1, 2, 4):
            raise ConfigurationError(f"patch_size must be 1, 2 or 4, got {self.patch_size}")
        if self.skip not in ("residual", "blockwise"):
            raise ConfigurationError(f"unknown skip scheme {self.skip!r}")
        if self.skip == "blockwise" and self.num_down_blocks != self.num_up_blocks:
            raise ConfigurationError("blockwise skips need matching down/up block counts")
        if self.prediction_space != "v":
            raise ConfigurationError("only v-prediction is supported")
        if self.in_channels <= 0 or self.num_classes < 0:
            raise ConfigurationError("in_channels must be positive and num_classes non-negative")

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def embed_dim(self) -> int:
        return self.cond_dim or 4 * self.channels[0]

    def num_heads(self, c: int) -> int:
        return max(1, c // self.head_dim)

    def level_resolutions(self, input_res: int) -> list[int]:
        """Spatial size at every level for a square input."""
        factor = self.patch_size * 2 ** (self.levels - 1)
        if input_res % factor:
            raise DimensionError(f"input resolution {input_res} not divisible by {factor}")
        top = input_res // self.patch_size
        return [top >> k for k in range(self.levels)]

    def level_blocks(self, k: int) -> list[tuple[str, int]]:
        """``(stage, count)`` pairs for level ``k``."""
        if k == self.levels - 1:
            return [("mid", self.num_mid_blocks)]
        return [("down", self.num_down_blocks[k]), ("up", self.num_up_blocks[k])]


# -- presets ---------------------------------------------------------------

_SMALL_PATCH = {512: 4, 256: 2, 128: 1}
_HEAVY_PATCH = {512: 2, 256: 1, 128: 1}


def small(image_res: int = 512, num_classes: int = 1000, **kw) -> UViTConfig:
    if image_res not in _SMALL_PATCH:
        raise ConfigurationError(f"no small preset for {image_res}")
    return UViTConfig(patch_size=_SMALL_PATCH[image_res], num_classes=num_classes, **kw)


def flop_heavy(image_res: int = 512, num_classes: int = 1000, **kw) -> UViTConfig:
    if image_res not in _HEAVY_PATCH:
        raise ConfigurationError(f"no flop-heavy preset for {image_res}")
    if image_res == 128:
        # The 128-channel top level is dropped at this resolution.
        return UViTConfig(
            channels=(256, 512, 1024),
            num_down_blocks=(3, 3),
            num_up_blocks=(3, 3),
            block_type=("ResBlock", "Transformer", "Transformer"),
            block_dropout=(0.0, 0.1, 0.1),
            patch_size=1,
            num_classes=num_classes,
            **kw,
        )
    return UViTConfig(patch_size=_HEAVY_PATCH[image_res], num_classes=num_classes, **kw)


def toy(num_classes: int = 0, **kw) -> UViTConfig:
    """Two-level 16x16 test network."""
    base = dict(
        channels=(32, 64),
        num_down_blocks=(2,),
        num_up_blocks=(2,),
        num_mid_blocks=4,
        block_type=("ResBlock", "Transformer"),
        block_dropout=(0.0, 0.0),
        patch_size=2,
        in_channels=3,
        num_classes=num_classes,
        head_dim=32,
    )
    base.update(kw)
    return UViTConfig(**base)


def toy_1d(width: int = 64, num_mid_blocks: int = 4, num_classes: int = 0, **kw) -> UViTConfig:
    """Single-level network on ``[N, 1, 1, 1]`` scalars."""
    base = dict(
        channels=(width,),
        num_down_blocks=(),
        num_up_blocks=(),
        num_mid_blocks=num_mid_blocks,
        block_type=("Transformer",),
        block_dropout=(0.0,),
        patch_size=1,
        in_channels=1,
        num_classes=num_classes,
        head_dim=width,
    )
    base.update(kw)
    return UViTConfig(**base)


# -- parameter tree --------------------------------------------------------

@dataclass(frozen=True)
class ParamSpec:
    shape: tuple
    init: str  # "normal" (fan-in scaled), "zeros" or "identity"
    fan_in: int = 1


def _block_specs(prefix: str, kind: str, c: int, e: int, mlp: int) -> list[tuple[str, ParamSpec]]:
    z = lambda *s: ParamSpec(tuple(s), "zeros")  # noqa: E731
    n = lambda fan, *s: ParamSpec(tuple(s), "normal", fan)  # noqa: E731
    if kind == "ResBlock":
        return [
            (f"{prefix}.scale.w", z(e, c)), (f"{prefix}.scale.b", z(c)),
            (f"{prefix}.shift.w", z(e, c)), (f"{prefix}.shift.b", z(c)),
            (f"{prefix}.conv1.k", n(9 * c, 3, 3, c, c)), (f"{prefix}.conv1.b", z(c)),
            (f"{prefix}.conv2.k", z(3, 3, c, c)), (f"{prefix}.conv2.b", z(c)),
        ]
    h = mlp * c
    return [
        (f"{prefix}.scale1.w", z(e, c)), (f"{prefix}.scale1.b", z(c)),
        (f"{prefix}.shift1.w", z(e, c)), (f"{prefix}.shift1.b", z(c)),
        (f"{prefix}.attn.wq", n(c, c, c)), (f"{prefix}.attn.bq", z(c)),
        (f"{prefix}.attn.wk", n(c, c, c)),
        (f"{prefix}.attn.wv", n(c, c, c)), (f"{prefix}.attn.bv", z(c)),
        (f"{prefix}.attn.wo", z(c, c)), (f"{prefix}.attn.bo", z(c)),
        (f"{prefix}.scale2.w", z(e, c)), (f"{prefix}.scale2.b", z(c)),
        (f"{prefix}.shift2.w", z(e, c)), (f"{prefix}.shift2.b", z(c)),
        (f"{prefix}.mlp.w1", n(c, c, h)), (f"{prefix}.mlp.b1", z(h)),
        (f"{prefix}.mlp.w2", z(h, c)), (f"{prefix}.mlp.b2", z(c)),
    ]


def param_specs(cfg: UViTConfig) -> "OrderedDict[str, ParamSpec]":
    """Every parameter's name, shape and initialiser, without allocating."""
    e = cfg.embed_dim
    c0 = cfg.channels[0]
    half = c0 // 2 * 2
    p2c = cfg.patch_size ** 2 * cfg.in_channels
    specs: list[tuple[str, ParamSpec]] = [
        ("embed.lam.w1", ParamSpec((half, e), "normal", half)),
        ("embed.lam.b1", ParamSpec((e,), "zeros")),
        ("embed.lam.w2", ParamSpec((e, e), "normal", e)),
        ("embed.lam.b2", ParamSpec((e,), "zeros")),
    ]
    if cfg.num_classes:
        specs.append(("embed.class", ParamSpec((cfg.num_classes + 1, e), "normal", 1)))
    specs += [
        ("in_proj.w", ParamSpec((p2c, c0), "normal", p2c)),
        ("in_proj.b", ParamSpec((c0,), "zeros")),
    ]
    for k, (c, kind) in enumerate(zip(cfg.channels, cfg.block_type)):
        for stage, count in cfg.level_blocks(k):
            if stage == "up":
                continue
            for i in range(count):
                specs += _block_specs(f"level{k}.{stage}{i}", kind, c, e, cfg.mlp_ratio)
        if k < cfg.levels - 1:
            c1 = cfg.channels[k + 1]
            specs.append((f"level{k}.D.w", ParamSpec((c, c1), "normal", c)))
            specs.append((f"level{k}.U.w", ParamSpec((c1, c), "normal", c1)))
            for i in range(cfg.num_up_blocks[k]):
                if cfg.skip == "blockwise":
                    specs.append((f"level{k}.merge{i}.w", ParamSpec((2 * c, c), "identity")))
                specs += _block_specs(f"level{k}.up{i}", kind, c, e, cfg.mlp_ratio)
    specs += [
        ("out.norm.g", ParamSpec((c0,), "ones")),
        ("out.norm.b", ParamSpec((c0,), "zeros")),
        ("out_proj.w", ParamSpec((c0, p2c), "zeros")),
        ("out_proj.b", ParamSpec((p2c,), "zeros")),
    ]
    return OrderedDict(specs)


def count_params(cfg: UViTConfig, prefix: str | None = None) -> int:
    return int(sum(math.prod(s.shape) for name, s in param_specs(cfg).items()
                   if prefix is None or name.startswith(prefix)))


def _init(spec: ParamSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.init == "zeros":
        return np.zeros(spec.shape)
    if spec.init == "ones":
        return np.ones(spec.shape)
    if spec.init == "identity":
        c = spec.shape[1]
        return np.vstack([np.eye(c), np.zeros((spec.shape[0] - c, c))])
    return rng.standard_normal(spec.shape) / math.sqrt(spec.fan_in)


# -- model -----------------------------------------------------------------

def sinusoidal(values: np.ndarray, dim: int, min_period: float = 0.1, max_period: float = 200.0) -> np.ndarray:
    """``[sin, cos]`` features of scalars at geometrically spaced periods."""
    half = dim // 2
    periods = np.geomspace(min_period, max_period, half) if half > 1 else np.array([max_period])
    arg = np.asarray(values, dtype=np.float64)[:, None] * (2.0 * math.pi / periods)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def position_table(h: int, w: int, c: int) -> np.ndarray:
    """Fixed 2-D sinusoidal positions ``[h*w, c]``: rows in the first half, columns in the second."""
    quarter = c // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / max(quarter, 1)))
    rows = np.arange(h)[:, None] * freqs
    cols = np.arange(w)[:, None] * freqs
    row_feat = np.concatenate([np.sin(rows), np.cos(rows)], axis=1)
    col_feat = np.concatenate([np.sin(cols), np.cos(cols)], axis=1)
    table = np.concatenate(
        [np.repeat(row_feat[:, None, :], w, axis=1), np.repeat(col_feat[None, :, :], h, axis=0)], axis=2
    )
    return table.reshape(h * w, 4 * quarter)


class ResidualUViT:
    def __init__(self, config: UViTConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._pos_cache: dict[tuple, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def with_params(self, arrays: dict[str, np.ndarray], requires_grad: bool = False) -> "ResidualUViT":
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise ConfigurationError(f"parameter names differ: {sorted(missing)[:5]}")
        return ResidualUViT(self.config, {k: Tensor(arrays[k], requires_grad=requires_grad, name=k)
                                          for k in self.params})

    # conditioning
    def condition(self, lam, labels=None) -> Tensor:
        cfg = self.config
        lam = np.asarray(lam, dtype=np.float64).reshape(-1)
        half = cfg.channels[0] // 2 * 2
        feat = Tensor._wrap(sinusoidal(lam, half), False)
        p = self.params
        c = ops.linear(ops.silu(ops.linear(feat, p["embed.lam.w1"], p["embed.lam.b1"])), p["embed.lam.w2"], p["embed.lam.b2"])
        if cfg.num_classes:
            if labels is None:
                labels = np.full(lam.shape[0], -1)
            labels = np.asarray(labels, dtype=np.int64).reshape(-1)
            if labels.shape != lam.shape:
                raise DimensionError(f"{labels.shape[0]} labels for {lam.shape[0]} examples")
            if np.any(labels >= cfg.num_classes) or np.any(labels < -1):
                raise DimensionError(f"labels must lie in [-1, {cfg.num_classes})")
            idx = np.where(labels < 0, cfg.num_classes, labels)
            c = ops.add(c, ops.embedding(p["embed.class"], idx))
        return ops.silu(c)

    def _modulate(self, x: Tensor, cond: Tensor, scale: str, shift: str) -> Tensor:
        p = self.params
        a = ops.layer_norm(x)
        s = ops.expand_batch(ops.linear(cond, p[scale + ".w"], p[scale + ".b"]), a.shape)
        b = ops.expand_batch(ops.linear(cond, p[shift + ".w"], p[shift + ".b"]), a.shape)
        return ops.add(ops.add(a, ops.mul(a, s)), b)

    def _positions(self, h: int, w: int, c: int) -> Tensor:
        key = (h, w, c)
        if key not in self._pos_cache:
            self._pos_cache[key] = Tensor._wrap(position_table(h, w, c), False)
        return self._pos_cache[key]

    def block(self, prefix: str, kind: str, x: Tensor, cond: Tensor, dropout: float, rng) -> Tensor:
        p = self.params
        if kind == "ResBlock":
            a = ops.silu(self._modulate(x, cond, prefix + ".scale", prefix + ".shift"))
            a = ops.conv2d_3x3(a, p[prefix + ".conv1.k"], p[prefix + ".conv1.b"])
            a = ops.dropout(ops.silu(ops.layer_norm(a)), dropout, rng)
            return ops.add(x, ops.conv2d_3x3(a, p[prefix + ".conv2.k"], p[prefix + ".conv2.b"]))
        n, h, w, c = x.shape
        tokens = ops.reshape(x, (n, h * w, c))
        a = ops.reshape(self._modulate(x, cond, prefix + ".scale1", prefix + ".shift1"), (n, h * w, c))
        ctx = ops.add(a, self._positions(h, w, c))
        att = ops.self_attention(
            a, p[prefix + ".attn.wq"], p[prefix + ".attn.wk"], p[prefix + ".attn.wv"], p[prefix + ".attn.wo"],
            bq=p[prefix + ".attn.bq"], bv=p[prefix + ".attn.bv"], bo=p[prefix + ".attn.bo"],
            num_heads=self.config.num_heads(c), context=ctx,
        )
        tokens = ops.add(tokens, ops.dropout(att, dropout, rng))
        y = ops.reshape(tokens, (n, h, w, c))
        b = self._modulate(y, cond, prefix + ".scale2", prefix + ".shift2")
        m = ops.silu(ops.linear(b, p[prefix + ".mlp.w1"], p[prefix + ".mlp.b1"]))
        m = ops.linear(ops.dropout(m, dropout, rng), p[prefix + ".mlp.w2"], p[prefix + ".mlp.b2"])
        return ops.add(y, m)

    def _level(self, k: int, h: Tensor, cond: Tensor, rng) -> Tensor:
        cfg = self.config
        kind, drop = cfg.block_type[k], cfg.block_dropout[k]
        if k == cfg.levels - 1:
            for i in range(cfg.num_mid_blocks):
                h = self.block(f"level{k}.mid{i}", kind, h, cond, drop, rng)
            return h
        p = self.params
        skips = []
        for i in range(cfg.num_down_blocks[k]):
            h = self.block(f"level{k}.down{i}", kind, h, cond, drop, rng)
            skips.append(h)
        d = ops.linear(ops.avg_pool2(h), p[f"level{k}.D.w"])
        inner = self._level(k + 1, d, cond, rng)
        if cfg.skip == "residual":
            h = ops.add(h, ops.nearest_upsample2(ops.linear(ops.sub(inner, d), p[f"level{k}.U.w"])))
        else:
            h = ops.nearest_upsample2(ops.linear(inner, p[f"level{k}.U.w"]))
        for i in range(cfg.num_up_blocks[k]):
            if cfg.skip == "blockwise":
                h = ops.linear(ops.concat([h, skips.pop()], axis=-1), p[f"level{k}.merge{i}.w"])
            h = self.block(f"level{k}.up{i}", kind, h, cond, drop, rng)
        return h

    def core(self, h: Tensor, cond: Tensor, rng=None) -> Tensor:
        """Everything between the input and output projections."""
        f = 2 ** (self.config.levels - 1)
        if h.ndim != 4 or h.shape[1] % f or h.shape[2] % f:
            raise DimensionError(f"core input {h.shape} not divisible by {f}")
        return self._level(0, h, cond, rng)

    def predict_v(self, z, lam, labels=None, rng=None) -> Tensor:
        """Differentiable v-prediction for ``z`` of shape ``[N, H, W, C_in]``."""
        cfg = self.config
        z = z if isinstance(z, Tensor) else Tensor._wrap(np.asarray(z, dtype=np.float64), False)
        if z.ndim != 4 or z.shape[3] != cfg.in_channels:
            raise DimensionError(f"expected [N, H, W, {cfg.in_channels}], got {z.shape}")
        f = cfg.patch_size * 2 ** (cfg.levels - 1)
        if z.shape[1] % f or z.shape[2] % f:
            raise DimensionError(f"spatial dims {z.shape[1:3]} not divisible by {f}")
        lam = np.asarray(lam, dtype=np.float64)
        if lam.ndim == 0 and (labels is None or np.ndim(labels) == 0):
            # one noise level and label for the whole batch: embed once
            cond = self.condition(lam.reshape(1), None if labels is None else [labels])
        else:
            lam = np.broadcast_to(lam, (z.shape[0],))
            if labels is not None and np.ndim(labels) == 0:
                labels = np.full(z.shape[0], labels)
            cond = self.condition(lam, labels)
        p = self.params
        h = ops.linear(ops.space_to_depth(z, cfg.patch_size), p["in_proj.w"], p["in_proj.b"])
        h = self.core(h, cond, rng)
        h = ops.layer_norm(h, p["out.norm.g"], p["out.norm.b"])
        out = ops.linear(h, p["out_proj.w"], p["out_proj.b"])
        return ops.depth_to_space(out, cfg.patch_size)

    def __call__(self, z, level: NoiseLevel, conditioning=None) -> Prediction:
        """Inference entry point used by the sampler."""
        z = np.asarray(z, dtype=np.float64)
        with no_grad():
            v = self.predict_v(z, level.lam, conditioning).data
        return Prediction("v", v, level, z)


def build(config: UViTConfig, rng: np.random.Generator | None = None, requires_grad: bool = True) -> ResidualUViT:
    rng = np.random.default_rng(0) if rng is None else rng
    params = {name: Tensor(_init(spec, rng), requires_grad=requires_grad, name=name)
              for name, spec in param_specs(config).items()}
    return ResidualUViT(config, params)


def forward(model: ResidualUViT, z, level: NoiseLevel, conditioning=None) -> Prediction:
    return model(z, level, conditioning)


# -- memory accounting -----------------------------------------------------

@dataclass(frozen=True)
class MemoryReport:
    """Skip-retention bytes at evaluation time (2 bytes per element)."""

    blockwise_skip: int
    residual_skip: int
    per_level: tuple = field(default=())  # (resolution, channels, blockwise, residual)


def feature_map_bytes(res: int, channels: int, bytes_per_element: int = BYTES_PER_ELEMENT) -> int:
    return res * res * channels * bytes_per_element


def activation_memory(config: UViTConfig, input_res: int, batch: int = 1,
                      bytes_per_element: int = BYTES_PER_ELEMENT) -> MemoryReport:
    """Bytes held for skips while the deepest level runs, summed over the levels above it.

    Blockwise: one map per down block. Residual: ``h`` plus ``D(h)``.
    """
    rows = []
    for k, res in enumerate(config.level_resolutions(input_res)[:-1]):
        c, c1 = config.channels[k], config.channels[k + 1]
        fmap = feature_map_bytes(res, c, bytes_per_element)
        block = config.num_down_blocks[k] * fmap
        resid = fmap + feature_map_bytes(res // 2, c1, bytes_per_element)
        rows.append((res, c, block * batch, resid * batch))
    return MemoryReport(
        blockwise_skip=sum(r[2] for r in rows),
        residual_skip=sum(r[3] for r in rows),
        per_level=tuple(rows),
    )


__all__ = [
    "MemoryReport",
    "ParamSpec",
    "ResidualUViT",
    "UViTConfig",
    "activation_memory",
    "build",
    "count_params",
    "feature_map_bytes",
    "flop_heavy",
    "forward",
    "param_specs",
    "small",
    "toy",
    "toy_1d",
]
