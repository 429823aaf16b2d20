"""Experiment configuration files.

Files are line-based ``key = value`` listings in the style of published
experiment settings::

    channels = [128, 256, 512, 1024]
    loss_type = sigmoid:-3
    adam_eps = 1.e-12
    guidance_interval = (-3, 5)
    diffusion_schedule =
        'cosine_interpolated_low_32_high_512'

Values are Python literals; anything that is not a literal is read as a bare
string. ``#`` starts a comment, brackets may span lines, and ``[section]``
headers are accepted and ignored. Files ending in ``.json`` are parsed as a
flat JSON object instead. Unknown keys and malformed values raise
:class:`ConfigurationError` naming the key and line.
"""

from __future__ import annotations

import ast
import json
import math
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from pixdiff import uvit
from pixdiff.data import KINDS, ToyDataset
from pixdiff.diffusion import SamplerConfig
from pixdiff.errors import ConfigurationError
from pixdiff.schedules import default_schedule, from_name
from pixdiff.trainer import TrainConfig
from pixdiff.weightings import parse_loss_type

SEED_ENV = "SID2_SEED"
REF_RES = 512
REF_BIAS = -3.0
REF_GUIDANCE_LO = -3.0
SHIFT_PER_DOUBLING = 1.5
GUIDANCE_HI = 5.0
PRESETS = ("small", "flop_heavy", "toy", "toy_1d")


class ConfigKeyError(ConfigurationError):
    """A configuration error already located at a key and line."""


@dataclass(frozen=True)
class Entry:
    value: object
    line: int


@dataclass(frozen=True)
class Config:
    resolution: int
    model: uvit.UViTConfig
    train: TrainConfig
    sampler: SamplerConfig
    source: str = "<defaults>"
    values: dict = field(default_factory=dict, repr=False)


def suggest_shifted(image_res: int) -> dict:
    """Shift the sigmoid bias and the guidance-interval lower bound by 1.5 per doubling from 512."""
    doublings = math.log2(image_res / REF_RES)
    return {
        "bias": REF_BIAS - SHIFT_PER_DOUBLING * doublings,
        "guidance_interval_lo": REF_GUIDANCE_LO - SHIFT_PER_DOUBLING * doublings,
    }


# -- parsing -----------------------------------------------------------------

def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def _balanced(text: str) -> bool:
    depth = 0
    for ch in text:
        depth += ch in "([{"
        depth -= ch in ")]}"
    return depth <= 0


def _literal(text: str):
    text = text.strip().rstrip(",")
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def parse_text(text: str, source: str = "<string>") -> dict[str, Entry]:
    entries: dict[str, Entry] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        lineno = i + 1
        raw = _strip_comment(lines[i]).strip()
        i += 1
        if not raw or re.match(r"^\[[A-Za-z0-9_.]+\]$", raw):
            continue
        if "=" not in raw:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in raw.split("=", 1))
        if not _KEY.match(key):
            raise ConfigurationError(f"{source}:{lineno}: invalid key {key!r}")
        while (not value or not _balanced(value)) and i < len(lines):
            value = (value + " " + _strip_comment(lines[i]).strip()).strip()
            i += 1
        if not value:
            raise ConfigurationError(f"{source}:{lineno}: key {key!r} has no value")
        if key in entries:
            raise ConfigurationError(f"{source}:{lineno}: key {key!r} repeated (first on line {entries[key].line})")
        entries[key] = Entry(_literal(value), lineno)
    return entries


def _parse_json(text: str, source: str) -> dict[str, Entry]:
    try:
        obj = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{source}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ConfigurationError(f"{source}: top level must be an object")
    lines = text.splitlines()
    out = {}
    for key, value in obj.items():
        lineno = next((n + 1 for n, l in enumerate(lines) if f'"{key}"' in l), 0)
        out[key] = Entry(value, lineno)
    return out


# -- typed accessors ---------------------------------------------------------

class _Reader:
    def __init__(self, entries: dict[str, Entry], source: str):
        self.entries = entries
        self.source = source
        self.used: set[str] = set()

    def fail(self, key: str, msg: str):
        line = self.entries[key].line if key in self.entries else 0
        raise ConfigKeyError(f"{self.source}:{line}: key {key!r}: {msg}")

    def has(self, key: str) -> bool:
        return key in self.entries

    def get(self, key: str, kind, default=None):
        self.used.add(key)
        if key not in self.entries:
            return default
        value = self.entries[key].value
        try:
            return kind(value)
        except (TypeError, ValueError, ConfigurationError) as exc:
            self.fail(key, f"malformed value {value!r} ({exc})")


def _int(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError("expected an integer")
    return v


def _float(v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError("expected a number")
    return float(v)


def _str(v) -> str:
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


def _ints(v) -> tuple:
    if not isinstance(v, (list, tuple)):
        raise TypeError("expected a list of integers")
    return tuple(_int(x) for x in v)


def _floats(v) -> tuple:
    if not isinstance(v, (list, tuple)):
        raise TypeError("expected a list of numbers")
    return tuple(_float(x) for x in v)


def _strs(v) -> tuple:
    if not isinstance(v, (list, tuple)):
        raise TypeError("expected a list of strings")
    return tuple(_str(x) for x in v)


def _interval(v) -> tuple:
    if isinstance(v, str):
        v = ast.literal_eval(v)
    out = _floats(v)
    if len(out) != 2:
        raise ValueError("expected (lo, hi)")
    return out


def _gamma(v) -> float:
    # logvar_type holds the interpolation exponent, usually as a string like '0.3'
    return float(v) if isinstance(v, str) else _float(v)


def _choice(options):
    def check(v):
        v = _str(v)
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return check


# -- assembly ----------------------------------------------------------------

def _model(r: _Reader, res: int) -> uvit.UViTConfig:
    preset = r.get("model", _choice(PRESETS), "small")
    num_classes = r.get("num_classes", _int)
    kw = {} if num_classes is None else {"num_classes": num_classes}
    try:
        if preset == "small":
            base = uvit.small(res, **kw)
        elif preset == "flop_heavy":
            base = uvit.flop_heavy(res, **kw)
        elif preset == "toy":
            base = uvit.toy(**kw)
        else:
            base = uvit.toy_1d(**kw)
    except ConfigurationError as exc:
        if isinstance(exc, ConfigKeyError):
            raise
        r.fail("model" if r.has("model") else "resolution", str(exc))
    over = {}
    for key, attr, kind in (
        ("channels", "channels", _ints),
        ("num_mid_blocks", "num_mid_blocks", _int),
        ("block_dropout", "block_dropout", _floats),
        ("block_type", "block_type", _strs),
        ("patching_size", "patch_size", _int),
        ("in_channels", "in_channels", _int),
        ("head_dim", "head_dim", _int),
        ("mlp_ratio", "mlp_ratio", _int),
        ("skip", "skip", _choice(("residual", "blockwise"))),
    ):
        value = r.get(key, kind)
        if value is not None:
            over[attr] = value
    updown = r.get("num_updown_blocks", _ints)
    if updown is not None:
        over["num_down_blocks"] = over["num_up_blocks"] = updown
    for key in ("num_down_blocks", "num_up_blocks"):
        value = r.get(key, _ints)
        if value is not None:
            over[key] = value
    mean_type = r.get("mean_type", _str)
    if mean_type is not None and mean_type != "v":
        r.fail("mean_type", "only 'v' is supported")
    if "channels" in over:
        # keep per-level tuples consistent when only the channel list changes length
        n = len(over["channels"])
        for attr in ("block_type", "block_dropout"):
            if attr not in over and len(getattr(base, attr)) != n:
                r.fail("channels", f"{attr} must be given for {n} levels")
    try:
        return replace(base, **over)
    except ConfigurationError as exc:
        if isinstance(exc, ConfigKeyError):
            raise
        key = next(iter(over), "model")
        for k in ("channels", "block_type", "block_dropout", "patching_size", "num_updown_blocks"):
            if r.has(k):
                key = k
                break
        r.fail(key, str(exc))
    except TypeError as exc:
        r.fail("model", str(exc))


def _dataset(r: _Reader, model: uvit.UViTConfig) -> ToyDataset:
    kind = r.get("dataset", _choice(KINDS))
    if kind is None:
        kind = "two_gaussians_1d" if model.in_channels == 1 else "shapes_16x16"
    try:
        return ToyDataset(
            kind,
            resolution=r.get("dataset_resolution", _int, 16),
            bits=r.get("dataset_bits", _int, 3),
            path=r.get("dataset_path", _str),
        )
    except ConfigurationError as exc:
        if isinstance(exc, ConfigKeyError):
            raise
        r.fail("dataset", str(exc))


def build_config(entries: dict[str, Entry], source: str = "<string>", env: dict | None = None) -> Config:
    env = os.environ if env is None else env
    r = _Reader(entries, source)
    res = r.get("resolution", _int, 128)
    seed = r.get("seed", _int, 0)
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    suggested = suggest_shifted(res)

    model = _model(r, res)

    sched_name = r.get("diffusion_schedule", _str)
    try:
        schedule = default_schedule(res) if sched_name is None else from_name(sched_name, res)
    except ConfigurationError as exc:
        if isinstance(exc, ConfigKeyError):
            raise
        r.fail("diffusion_schedule", str(exc))
    loss_type = r.get("loss_type", lambda v: str(v))
    try:
        weighting = parse_loss_type(loss_type if loss_type is not None else f"sigmoid:{_preset_bias(res)}")
    except ConfigurationError as exc:
        if isinstance(exc, ConfigKeyError):
            raise
        r.fail("loss_type", str(exc))
    optimizer = r.get("optimizer", _str, "adam")
    if optimizer != "adam":
        r.fail("optimizer", "only 'adam' is supported")
    try:
        train = TrainConfig(
            batch_size=r.get("batch_size", _int, 2048),
            learning_rate=r.get("learning_rate", _float, 1e-4),
            warmup_steps=r.get("learning_rate_warmup_steps", _int, 10_000),
            adam_beta1=r.get("adam_beta1", _float, 0.9),
            adam_beta2=r.get("adam_beta2", _float, 0.99),
            adam_eps=r.get("adam_eps", _float, 1e-12),
            weight_decay=r.get("weight_decay", _float, 0.0),
            ema_decay=r.get("ema_decay", _float, 0.9999),
            max_steps=r.get("max_train_steps", _int, 1_000_000),
            weighting=weighting,
            schedule=schedule,
            label_drop_prob=r.get("label_drop_prob", _float, 0.1),
            seed=seed,
            dataset=_dataset(r, model),
        )
    except ConfigurationError as exc:
        if isinstance(exc, ConfigKeyError):
            raise
        keys = ("learning_rate_warmup_steps", "max_train_steps", "ema_decay", "weight_decay",
                "batch_size", "label_drop_prob", "learning_rate")
        r.fail(next((k for k in keys if r.has(k)), "max_train_steps"), str(exc))

    sampler_name = r.get("sampler", _str, "ddpm")
    if sampler_name != "ddpm":
        r.fail("sampler", "only 'ddpm' is supported")
    interval = r.get("guidance_interval", _interval)
    if interval is None:
        interval = (suggested["guidance_interval_lo"], GUIDANCE_HI)
    try:
        sampler = SamplerConfig(
            num_steps=r.get("num_steps", _int, 512),
            gamma=r.get("logvar_type", _gamma, 0.3),
            guidance_scale=r.get("guidance", _float, 1.0),
            guidance_interval=interval,
            clip_x=r.get("clip_x", _choice(("none", "static")), "static"),
            seed=seed,
            guidance_space=r.get("guidance_space", _choice(("x", "eps", "v")), "x"),
        )
    except ConfigurationError as exc:
        if isinstance(exc, ConfigKeyError):
            raise
        keys = ("guidance_interval", "num_steps", "logvar_type", "guidance")
        r.fail(next((k for k in keys if r.has(k)), "guidance_interval"), str(exc))

    unknown = [k for k in entries if k not in r.used]
    if unknown:
        k = unknown[0]
        raise ConfigurationError(f"{source}:{entries[k].line}: unknown key {k!r}")
    values = {k: e.value for k, e in entries.items()}
    return Config(res, model, train, sampler, source, values)


def _preset_bias(res: int) -> float:
    from pixdiff.weightings import DEFAULT_BIAS

    return DEFAULT_BIAS.get(res, suggest_shifted(res)["bias"])


def config_load(path, env: dict | None = None) -> Config:
    """Read, default and validate a configuration file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {str(path)!r} not found")
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigurationError(f"cannot read {str(path)!r}: {exc}") from None
    source = str(path)
    entries = _parse_json(text, source) if path.suffix == ".json" else parse_text(text, source)
    return build_config(entries, source, env)


def config_from_text(text: str, env: dict | None = None) -> Config:
    return build_config(parse_text(text), "<string>", env)
