"""Orthonormal 2-D Haar decomposition of channels-last images.

One level filters along the width axis first (``L``/``H``), then along the
height axis of each half, giving ``LL, LH, HL, HH``. Further levels recurse on
``LL``, so two levels give ``LLLL, LLLH, LLHL, LLHH, LH, HL, HH``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pixdiff.engine.tensor import Tensor
from pixdiff.errors import DimensionError

_SQRT_HALF = np.sqrt(0.5)
# Image axes for [..., H, W, C]
_H, _W = -3, -2


def _split(a: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    even = np.take(a, np.arange(0, a.shape[axis], 2), axis=axis)
    odd = np.take(a, np.arange(1, a.shape[axis], 2), axis=axis)
    return (even + odd) * _SQRT_HALF, (even - odd) * _SQRT_HALF


def _merge(s: np.ndarray, d: np.ndarray, axis: int) -> np.ndarray:
    even = (s + d) * _SQRT_HALF
    odd = (s - d) * _SQRT_HALF
    shape = list(s.shape)
    shape[axis] *= 2
    out = np.empty(shape, dtype=np.result_type(s, d))
    idx = [slice(None)] * out.ndim
    idx[axis] = slice(0, None, 2)
    out[tuple(idx)] = even
    idx[axis] = slice(1, None, 2)
    out[tuple(idx)] = odd
    return out


def haar_step(a: np.ndarray) -> dict[str, np.ndarray]:
    """One decomposition level on ``[..., H, W, C]``."""
    lo, hi = _split(a, _W)
    ll, lh = _split(lo, _H)
    hl, hh = _split(hi, _H)
    return {"LL": ll, "LH": lh, "HL": hl, "HH": hh}


def haar_step_inverse(ll, lh, hl, hh) -> np.ndarray:
    lo = _merge(ll, lh, _H)
    hi = _merge(hl, hh, _H)
    return _merge(lo, hi, _W)


@dataclass(frozen=True)
class SubBand:
    label: str
    band: Tensor
    low_pass_count: int

    @property
    def energy(self) -> float:
        return float(np.sum(self.band.data ** 2))


@dataclass(frozen=True)
class SubBandSet:
    bands: tuple
    levels: int
    shape: tuple

    def __iter__(self):
        return iter(self.bands)

    def __len__(self) -> int:
        return len(self.bands)

    def __getitem__(self, label: str) -> SubBand:
        for b in self.bands:
            if b.label == label:
                return b
        raise KeyError(label)

    @property
    def labels(self) -> list[str]:
        return [b.label for b in self.bands]

    def arrays(self) -> dict[str, np.ndarray]:
        return {b.label: b.band.data for b in self.bands}


def band_labels(levels: int) -> list[str]:
    """Band labels ordered from the deepest level outwards."""
    if levels < 0:
        raise ValueError("levels must be non-negative")
    if levels == 0:
        return [""]
    labels: list[str] = []
    for k in range(levels, 0, -1):
        prefix = "LL" * (k - 1)
        suffixes = ("LL", "LH", "HL", "HH") if k == levels else ("LH", "HL", "HH")
        labels = labels + [prefix + s for s in suffixes]
    return labels


def low_pass_count(label: str) -> int:
    return label.count("L")


def _check_divisible(shape: tuple, levels: int) -> None:
    if len(shape) < 3:
        raise DimensionError(f"expected [..., H, W, C], got shape {shape}")
    f = 2 ** levels
    if shape[_H] % f or shape[_W] % f:
        raise DimensionError(f"H={shape[_H]}, W={shape[_W]} not divisible by 2**{levels}")


def haar_arrays(a: np.ndarray, levels: int) -> dict[str, np.ndarray]:
    """Forward transform returning plain arrays keyed by label (``''`` at levels=0)."""
    a = np.asarray(a)
    _check_divisible(a.shape, levels)
    if levels == 0:
        return {"": a.copy()}
    out: dict[str, np.ndarray] = {}
    cur = a
    for k in range(1, levels + 1):
        prefix = "LL" * (k - 1)
        parts = haar_step(cur)
        for key in ("LH", "HL", "HH"):
            out[prefix + key] = parts[key]
        cur = parts["LL"]
    out["LL" * levels] = cur
    return {lab: out[lab] for lab in band_labels(levels)}


def haar_arrays_inverse(bands: dict[str, np.ndarray], levels: int) -> np.ndarray:
    if levels == 0:
        return np.array(bands[""], copy=True)
    cur = bands["LL" * levels]
    for k in range(levels, 0, -1):
        prefix = "LL" * (k - 1)
        cur = haar_step_inverse(cur, bands[prefix + "LH"], bands[prefix + "HL"], bands[prefix + "HH"])
    return cur


def haar_forward_2d(image, levels: int) -> SubBandSet:
    """Decompose ``image`` (``[H, W, C]`` or batched ``[N, H, W, C]``) into labelled sub-bands."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    bands = haar_arrays(arr, levels)
    return SubBandSet(
        bands=tuple(SubBand(lab, Tensor._wrap(b, False), low_pass_count(lab)) for lab, b in bands.items()),
        levels=levels,
        shape=arr.shape,
    )


def haar_inverse_2d(subbands: SubBandSet) -> np.ndarray:
    return haar_arrays_inverse(subbands.arrays(), subbands.levels)
