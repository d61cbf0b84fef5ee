"""Differentiable kernels over :class:`~simvit.autodiff.Tensor`.

Every function here is pure in the forward direction and registers an
analytic vector-Jacobian closure on the active tape. Inputs may be
``Tensor`` or ``Parameter`` (the parameter's value is used and receives
gradient). Mixed float32/float64 operands are rejected rather than
silently promoted.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .autodiff import Parameter, Tensor, push
from .errors import NumericError, ShapeError

LN_EPS = 1e-5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _t(x) -> Tensor:
    if isinstance(x, Parameter):
        return x.value
    if isinstance(x, Tensor):
        return x
    raise TypeError(f"expected Tensor or Parameter, got {type(x).__name__}")


def _same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed dtypes {dt.name} and {t.dtype.name}")
    return dt


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def matmul(a, b) -> Tensor:
    """Product of two rank-2 tensors."""
    ta, tb = _t(a), _t(b)
    _same_dtype(ta, tb)
    A, B = ta.data, tb.data
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ta.shape} x {tb.shape}")
    out = Tensor(A @ B)

    def vjp(g):
        return g @ B.T, A.T @ g

    push(out, (ta, tb), vjp)
    return out


def linear(x, w, b) -> Tensor:
    """Affine map over the last axis: ``y = x @ w + b``.

    Leading axes of ``x`` are treated as batch.
    """
    tx, tw, tb = _t(x), _t(w), _t(b)
    _same_dtype(tx, tw, tb)
    if tw.ndim != 2 or tb.ndim != 1 or tw.shape[1] != tb.shape[0]:
        raise ShapeError(f"linear: weight {tw.shape} and bias {tb.shape} disagree")
    if tx.shape[-1] != tw.shape[0]:
        raise ShapeError(
            f"linear: input width {tx.shape[-1]} != weight rows {tw.shape[0]}"
        )
    out = Tensor(tx.data @ tw.data + tb.data)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = tx.data.reshape(-1, tx.shape[-1])
        return g @ tw.data.T, x2.T @ g2, g2.sum(axis=0)

    push(out, (tx, tw, tb), vjp)
    return out


def softmax_lastdim(x) -> Tensor:
    """Stabilized softmax along the last axis."""
    tx = _t(x)
    X = tx.data
    if X.shape[-1] < 1:
        raise ShapeError("softmax_lastdim: empty last axis")
    if not np.all(np.isfinite(X)):
        raise NumericError("softmax_lastdim: non-finite input")
    e = np.exp(X - X.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    push(out, (tx,), vjp)
    return out


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Normalize each last-axis slice to zero mean, unit variance, then scale.

    Uses the population variance (divisor C, not C-1).
    """
    tx, tg, tb = _t(x), _t(gamma), _t(beta)
    _same_dtype(tx, tg, tb)
    C = tx.shape[-1]
    if tg.shape != (C,) or tb.shape != (C,):
        raise ShapeError(
            f"layer_norm: gamma {tg.shape} / beta {tb.shape} do not match width {C}"
        )
    X = tx.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * tg.data + tb.data)

    def vjp(g):
        g2 = g.reshape(-1, C)
        xhat2 = xhat.reshape(-1, C)
        dgamma = (g2 * xhat2).sum(axis=0)
        dbeta = g2.sum(axis=0)
        dxhat = g * tg.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    push(out, (tx, tg, tb), vjp)
    return out


def gelu(x) -> Tensor:
    """Exact Gaussian error linear unit, ``x * Phi(x)`` with the erf CDF."""
    tx = _t(x)
    X = tx.data
    cdf = 0.5 * (1.0 + erf(X * _INV_SQRT2))
    out = Tensor(X * cdf)

    def vjp(g):
        pdf = np.exp(-0.5 * X * X) * _INV_SQRT_2PI
        return (g * (cdf + X * pdf),)

    push(out, (tx,), vjp)
    return out


def depthwise_conv3x3(x, k, b) -> Tensor:
    """Per-channel 3x3 cross-correlation, zero padding 1, stride 1.

    ``x`` is ``(..., H, W, C)``; the kernel is ``(3, 3, C)`` indexed
    ``[ky, kx, c]``. Output resolution equals input resolution.
    """
    tx, tk, tb = _t(x), _t(k), _t(b)
    _same_dtype(tx, tk, tb)
    if tx.ndim < 3:
        raise ShapeError(f"depthwise_conv3x3: need (..., H, W, C), got {tx.shape}")
    C = tx.shape[-1]
    if tk.shape != (3, 3, C) or tb.shape != (C,):
        raise ShapeError(
            f"depthwise_conv3x3: kernel {tk.shape} / bias {tb.shape} do not match"
            f" {C} channels"
        )
    H, W = tx.shape[-3], tx.shape[-2]
    pad = [(0, 0)] * (tx.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    Xp = np.pad(tx.data, pad)
    K = tk.data
    Y = np.zeros_like(tx.data)
    for dy in range(3):
        for dx in range(3):
            Y += Xp[..., dy : dy + H, dx : dx + W, :] * K[dy, dx]
    Y += tb.data
    out = Tensor(Y)

    def vjp(g):
        dxp = np.zeros_like(Xp)
        dk = np.zeros_like(K)
        sum_axes = tuple(range(g.ndim - 1))
        for dy in range(3):
            for dx in range(3):
                dxp[..., dy : dy + H, dx : dx + W, :] += g * K[dy, dx]
                dk[dy, dx] = (g * Xp[..., dy : dy + H, dx : dx + W, :]).sum(
                    axis=sum_axes
                )
        db = g.sum(axis=sum_axes)
        return dxp[..., 1 : H + 1, 1 : W + 1, :], dk, db

    push(out, (tx, tk, tb), vjp)
    return out


def zero_pad2d(x, p: int) -> Tensor:
    """Pad the two spatial axes of ``(..., H, W, C)`` with a ring of zeros."""
    tx = _t(x)
    if tx.ndim < 3:
        raise ShapeError(f"zero_pad2d: need (..., H, W, C), got {tx.shape}")
    if p < 0:
        raise ValueError(f"zero_pad2d: negative padding {p}")
    if p == 0:
        out = Tensor(tx.data.copy())
        push(out, (tx,), lambda g: (g,))
        return out
    H, W = tx.shape[-3], tx.shape[-2]
    pad = [(0, 0)] * (tx.ndim - 3) + [(p, p), (p, p), (0, 0)]
    out = Tensor(np.pad(tx.data, pad))

    def vjp(g):
        return (g[..., p : p + H, p : p + W, :],)

    push(out, (tx,), vjp)
    return out


def global_avg_pool(x) -> Tensor:
    """Mean over the two spatial axes of ``(..., H, W, C)``."""
    tx = _t(x)
    if tx.ndim < 3:
        raise ShapeError(f"global_avg_pool: need (..., H, W, C), got {tx.shape}")
    H, W = tx.shape[-3], tx.shape[-2]
    out = Tensor(tx.data.mean(axis=(-3, -2)))

    def vjp(g):
        gx = np.broadcast_to(
            np.expand_dims(g, (-3, -2)) / (H * W), tx.shape
        )
        return (np.ascontiguousarray(gx),)

    push(out, (tx,), vjp)
    return out


# Plumbing primitives used to compose attention and the blocks. They carry
# the same recording contract as the kernels above.


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    ta, tb = _t(a), _t(b)
    _same_dtype(ta, tb)
    out = Tensor(ta.data + tb.data)

    def vjp(g):
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    push(out, (ta, tb), vjp)
    return out


def scale(x, c: float) -> Tensor:
    """Multiply by a python scalar."""
    tx = _t(x)
    out = Tensor(tx.data * tx.dtype.type(c))

    def vjp(g):
        return (g * tx.dtype.type(c),)

    push(out, (tx,), vjp)
    return out


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    tx = _t(x)
    out = Tensor(tx.data.reshape(shape))

    def vjp(g):
        return (g.reshape(tx.shape),)

    push(out, (tx,), vjp)
    return out


def transpose(x, axes: tuple[int, ...]) -> Tensor:
    tx = _t(x)
    out = Tensor(np.ascontiguousarray(tx.data.transpose(axes)))
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    push(out, (tx,), vjp)
    return out


def bmm(a, b) -> Tensor:
    """Batched matrix product; leading axes must match exactly."""
    ta, tb = _t(a), _t(b)
    _same_dtype(ta, tb)
    A, B = ta.data, tb.data
    if (
        A.ndim < 2
        or B.ndim < 2
        or A.shape[:-2] != B.shape[:-2]
        or A.shape[-1] != B.shape[-2]
    ):
        raise ShapeError(f"bmm: incompatible shapes {ta.shape} x {tb.shape}")
    out = Tensor(A @ B)

    def vjp(g):
        return g @ B.swapaxes(-1, -2), A.swapaxes(-1, -2) @ g

    push(out, (ta, tb), vjp)
    return out


def weighted_sum(x, weights: np.ndarray) -> Tensor:
    """Scalar probe ``sum(x * weights)`` with constant weights.

    Used by gradient audits to turn any kernel output into a scalar with a
    non-degenerate gradient.
    """
    tx = _t(x)
    w = np.asarray(weights, dtype=tx.dtype)
    if w.shape != tx.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} != input {tx.shape}")
    out = Tensor(np.asarray((tx.data * w).sum(), dtype=tx.dtype))

    def vjp(g):
        return (g * w,)

    push(out, (tx,), vjp)
    return out
