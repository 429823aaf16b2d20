"""Differentiable tensor operations.

Layout is channels-last (``[N, H, W, C]`` for images, ``[N, L, C]`` for token
sequences). Binary ops require equal shapes, except that ``add``/``sub``
accept a right operand whose shape equals a trailing suffix of the left
operand's shape (bias add).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from pixdiff.engine.tensor import Tensor, grad_enabled
from pixdiff.errors import DimensionError

__all__ = [
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "scale_batch",
    "square",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "matmul",
    "linear",
    "conv2d_3x3",
    "avg_pool2",
    "nearest_upsample2",
    "space_to_depth",
    "depth_to_space",
    "layer_norm",
    "silu",
    "softmax",
    "concat",
    "expand_batch",
    "embedding",
    "dropout",
    "self_attention",
]


def _result(data: np.ndarray, inputs: tuple, op: str, backward) -> Tensor:
    from pixdiff.engine.tensor import Node

    req = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, req)
    if req:
        out.node = Node(op, inputs, backward)
    return out


def _is_suffix(small: tuple, big: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and not _is_suffix(b.shape, a.shape):
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} are incompatible")
    shape_b = b.shape

    def backward(g):
        return g, _reduce_to(g, shape_b)

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and not _is_suffix(b.shape, a.shape):
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} are incompatible")
    shape_b = b.shape

    def backward(g):
        return g, -_reduce_to(g, shape_b)

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, g * ad

    return _result(ad * bd, (a, b), "mul", backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), "scale", lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + float(c), (a,), "add_scalar", lambda g: (g,))


def scale_batch(a: Tensor, coeffs) -> Tensor:
    """Multiply example ``n`` of a batch by the constant ``coeffs[n]``."""
    c = np.asarray(coeffs, dtype=a.dtype)
    if c.shape != (a.shape[0],):
        raise DimensionError(f"scale_batch: need {a.shape[0]} coefficients, got {c.shape}")
    c = c.reshape((-1,) + (1,) * (a.ndim - 1))
    return _result(a.data * c, (a,), "scale_batch", lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), "square", lambda g: (2.0 * ad * g,))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axes)), (a,), "sum", backward)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axes), 1.0 / count)


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _result(out, (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inverse),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors, or batched over identical leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError(f"matmul: ranks {a.ndim} and {b.ndim} unsupported")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), "matmul", backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` contracting the last axis of ``x``; ``w`` is ``[C_in, C_out]``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    wd = w.data
    out = x2 @ wd
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],))
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out.reshape(lead + (wd.shape[1],)), inputs, "linear", backward)


def conv2d_3x3(x: Tensor, k: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 3x3 cross-correlation: ``[N,H,W,Ci] * [3,3,Ci,Co] -> [N,H,W,Co]``."""
    if x.ndim != 4 or k.ndim != 4 or k.shape[:2] != (3, 3):
        raise DimensionError(f"conv2d_3x3: bad shapes {x.shape}, {k.shape}")
    if x.shape[3] != k.shape[2]:
        raise DimensionError(f"conv2d_3x3: input has {x.shape[3]} channels, kernel expects {k.shape[2]}")
    if bias is not None and bias.shape != (k.shape[3],):
        raise DimensionError(f"conv2d_3x3: bias {bias.shape} does not match {k.shape[3]} outputs")
    n, h, w, ci = x.shape
    co = k.shape[3]
    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # cols: [N, H, W, 3, 3, Ci]
    cols = sliding_window_view(padded, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols2 = cols.reshape(n * h * w, 9 * ci)
    kd = k.data
    k2 = kd.reshape(9 * ci, co)
    out = cols2 @ k2
    if bias is not None:
        out = out + bias.data
    inputs = (x, k) if bias is None else (x, k, bias)

    def backward(g):
        g2 = g.reshape(n * h * w, co)
        gk = (cols2.T @ g2).reshape(kd.shape)
        gcols = (g2 @ k2.T).reshape(n, h, w, 3, 3, ci)
        gpad = np.zeros((n, h + 2, w + 2, ci), dtype=g.dtype)
        for di in range(3):
            for dj in range(3):
                gpad[:, di:di + h, dj:dj + w, :] += gcols[:, :, :, di, dj, :]
        gx = gpad[:, 1:-1, 1:-1, :]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return _result(out.reshape(n, h, w, co), inputs, "conv2d_3x3", backward)


def _check_image(x: Tensor, op: str, factor: int = 1) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected [N,H,W,C], got {x.shape}")
    if x.shape[1] % factor or x.shape[2] % factor:
        raise DimensionError(f"{op}: spatial dims {x.shape[1:3]} not divisible by {factor}")


def avg_pool2(x: Tensor) -> Tensor:
    _check_image(x, "avg_pool2", 2)
    n, h, w, c = x.shape
    out = x.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def backward(g):
        g = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2)
        return (g * 0.25,)

    return _result(out, (x,), "avg_pool2", backward)


def nearest_upsample2(x: Tensor) -> Tensor:
    _check_image(x, "nearest_upsample2")
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _result(out, (x,), "nearest_upsample2", backward)


def _s2d(a: np.ndarray, p: int) -> np.ndarray:
    n, h, w, c = a.shape
    return a.reshape(n, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h // p, w // p, p * p * c)


def _d2s(a: np.ndarray, p: int) -> np.ndarray:
    n, h, w, cc = a.shape
    c = cc // (p * p)
    return a.reshape(n, h, w, p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h * p, w * p, c)


def space_to_depth(x: Tensor, p: int) -> Tensor:
    """Patchify ``[N,H,W,C] -> [N,H/p,W/p,C*p*p]`` (patch rows, patch cols, channel order)."""
    _check_image(x, "space_to_depth", p)
    return _result(_s2d(x.data, p), (x,), "space_to_depth", lambda g: (_d2s(g, p),))


def depth_to_space(x: Tensor, p: int) -> Tensor:
    if x.ndim != 4 or x.shape[3] % (p * p):
        raise DimensionError(f"depth_to_space: channels of {x.shape} not divisible by {p * p}")
    return _result(_d2s(x.data, p), (x,), "depth_to_space", lambda g: (_s2d(g, p),))


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, with optional affine ``gamma``/``beta``."""
    c = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (c,):
            raise DimensionError(f"layer_norm: parameter {p.shape} does not match {c} channels")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    inputs = (x,) + tuple(p for p in (gamma, beta) if p is not None)

    def backward(g):
        gh = g * gamma.data if gamma is not None else g
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append(_reduce_to(g * xhat, (c,)))
        if beta is not None:
            grads.append(_reduce_to(g, (c,)))
        return grads

    return _result(out, inputs, "layer_norm", backward)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = expit(xd)

    def backward(g):
        return (g * s * (1.0 + xd * (1.0 - s)),)

    return _result(xd * s, (x,), "silu", backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), "softmax", backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} along axis {axis}") from exc
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))]

    return _result(out, tensors, "concat", backward)


def expand_batch(v: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast per-example vectors ``[N,C]`` (or one shared ``[1,C]``) across the middle axes of ``shape``."""
    shape = tuple(shape)
    if v.ndim != 2 or v.shape[0] not in (1, shape[0]) or v.shape[1] != shape[-1]:
        raise DimensionError(f"expand_batch: cannot expand {v.shape} to {shape}")
    middle = tuple(range(1, len(shape) - 1))
    shared = v.shape[0] != shape[0]
    view = v.data.reshape((v.shape[0],) + (1,) * len(middle) + (shape[-1],))

    def backward(g):
        g = g.sum(axis=middle) if middle else g
        return (g.sum(axis=0, keepdims=True) if shared else g,)

    return _result(np.broadcast_to(view, shape).copy(), (v,), "expand_batch", backward)


def embedding(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"embedding: index out of range for {table.shape[0]} rows")
    rows = table.shape

    def backward(g):
        gt = np.zeros(rows, dtype=g.dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(table.data[idx], (table,), "embedding", backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or no generator is supplied."""
    if p <= 0.0 or rng is None:
        return x
    if p >= 1.0:
        raise ValueError("dropout probability must be < 1")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * mask, (x,), "dropout", lambda g: (g * mask,))


def self_attention(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    bq: Tensor | None = None,
    bk: Tensor | None = None,
    bv: Tensor | None = None,
    bo: Tensor | None = None,
    num_heads: int = 1,
    context: Tensor | None = None,
) -> Tensor:
    """Multi-head ``softmax(Q K^T / sqrt(d)) V`` followed by the output projection.

    ``context`` (same shape as ``x``) feeds the query/key projections when
    given; values are always projected from ``x``.
    """
    if x.ndim != 3 or x.shape[1] == 0:
        raise DimensionError(f"self_attention: expected [N,L,C] with L > 0, got {x.shape}")
    n, length, c = x.shape
    if c % num_heads:
        raise DimensionError(f"self_attention: {num_heads} heads do not divide {c} channels")
    d = c // num_heads
    qk_src = x if context is None else context

    def heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (n, length, num_heads, d)), (0, 2, 1, 3))

    q = heads(linear(qk_src, wq, bq))
    k = heads(linear(qk_src, wk, bk))
    v = heads(linear(x, wv, bv))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    attn = softmax(scores, axis=-1)
    out = transpose(matmul(attn, v), (0, 2, 1, 3))
    return linear(reshape(out, (n, length, c)), wo, bo)
