"""Atomic file output: CSV tables, binary PPM images and JSON sidecars."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def atomic_write_bytes(path, payload: bytes) -> Path:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def format_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """Comma-separated text with one header line and LF line endings."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    return atomic_write_text(path, format_csv(header, rows))


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Map ``[-1, 1]`` floats to 8-bit values."""
    img = np.clip((np.asarray(image, dtype=np.float64) + 1.0) * 127.5, 0.0, 255.0)
    return np.rint(img).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    """Binary P6 encoding of an ``[H, W, C]`` image in ``[-1, 1]`` (C of 1 is replicated)."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"PPM needs [H, W, 1|3], got {img.shape}")
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + to_uint8(img).tobytes()


def decode_ppm(payload: bytes) -> np.ndarray:
    """Parse a P6 file written by :func:`encode_ppm` into ``uint8 [H, W, 3]``."""
    parts = payload.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise ValueError("not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)


def write_ppm(path, image: np.ndarray) -> Path:
    return atomic_write_bytes(path, encode_ppm(image))


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
