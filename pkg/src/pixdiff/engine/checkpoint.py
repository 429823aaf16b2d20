"""Flat named-tensor checkpoint container.

Layout (all integers little-endian)::

    b"SID2" | version:u32 | count:u32
    repeated count times:
        name_len:u32 | name:utf-8 | rank:u32 | dims:u64*rank | payload:f64*prod(dims)
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import Mapping

import numpy as np

MAGIC = b"SID2"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            payload = blob[pos:pos + 8 * size]
            if len(payload) != 8 * size:
                raise CheckpointError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    blob = dumps(tensors)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
