"""Sliding-window geometry and central / global self-attention.

A token map ``(H, W, d)`` is zero-padded by ``p`` and covered with
overlapping ``k x k`` windows at stride ``s``. The number of windows is
``H' = floor((H + 2p - k) / s) + 1`` per axis (likewise ``W'``). With the
default ``(k, p, s) = (3, 1, 1)`` every token is the center of exactly one
window, so window count equals token count and attention preserves
resolution.

Central self-attention (``csa``) produces only the central token's
response: the center's query row is scored against the window's keys and
the softmax weights mix the window's values. ``mcsa`` runs this per head
for every window of a map and is the block used in the first three
pyramid stages; ``msa`` is conventional all-pairs attention used in the
last stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, push
from .errors import GeometryError, ShapeError
from .ops import (
    _same_dtype,
    _t,
    add,
    bmm,
    linear,
    matmul,
    reshape,
    scale,
    softmax_lastdim,
    transpose,
)


@dataclass(frozen=True)
class WindowSpec:
    """Sliding-window geometry: side ``k``, zero padding ``p``, stride ``s``."""

    k: int = 3
    p: int = 1
    s: int = 1

    def __post_init__(self):
        if self.k < 1 or self.s < 1 or self.p < 0:
            raise GeometryError(f"invalid window spec (k={self.k}, p={self.p}, s={self.s})")


@dataclass
class AttentionParams:
    """Projections for one multi-head attention module.

    ``wq/wk/wv`` are square ``(d, d)`` maps whose output columns split into
    ``heads`` contiguous slices of width ``d / heads``; ``wo`` recombines
    the concatenated heads. ``pos_bias``, when present, is an additive
    ``(N, N)`` score bias for the global variant only.
    """

    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    bq: Parameter
    bk: Parameter
    bv: Parameter
    bo: Parameter
    heads: int
    pos_bias: Tensor | None = None

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"AttentionParams.{name} must be ({d}, {d})")
        for name in ("bq", "bk", "bv", "bo"):
            if getattr(self, name).shape != (d,):
                raise ShapeError(f"AttentionParams.{name} must be ({d},)")
        if self.heads < 1 or d % self.heads != 0:
            raise ShapeError(f"width {d} not divisible by {self.heads} heads")

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @property
    def head_width(self) -> int:
        return self.width // self.heads


def window_count(H: int, W: int, spec: WindowSpec) -> tuple[int, int]:
    """Number of windows per axis for a padded ``H x W`` map."""
    k, p, s = spec.k, spec.p, spec.s
    if H + 2 * p < k or W + 2 * p < k:
        raise GeometryError(
            f"window k={k} exceeds padded map {H + 2 * p}x{W + 2 * p}"
            f" (H={H}, W={W}, p={p})"
        )
    return (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1


def _unfold_grid(x: Tensor, k: int, s: int, Hn: int, Wn: int) -> Tensor:
    """Gather ``k x k`` windows at stride ``s`` from an already padded map.

    Input ``(B, Hp, Wp, C)``, output ``(B, Hn, Wn, k*k, C)`` with window
    cells in raster order. The reverse pass scatter-adds each cell's
    gradient back onto its strided source slice.
    """
    B, Hp, Wp, C = x.shape
    win = np.empty((B, Hn, Wn, k, k, C), dtype=x.dtype)
    for wy in range(k):
        for wx in range(k):
            win[:, :, :, wy, wx, :] = x.data[
                :, wy : wy + s * Hn : s, wx : wx + s * Wn : s, :
            ]
    out = Tensor(win.reshape(B, Hn, Wn, k * k, C))

    def vjp(g):
        gw = g.reshape(B, Hn, Wn, k, k, C)
        dx = np.zeros_like(x.data)
        for wy in range(k):
            for wx in range(k):
                dx[:, wy : wy + s * Hn : s, wx : wx + s * Wn : s, :] += gw[
                    :, :, :, wy, wx, :
                ]
        return (dx,)

    push(out, (x,), vjp)
    return out


def unfold_windows(x, spec: WindowSpec) -> Tensor:
    """Extract all sliding windows of a token map.

    ``(H, W, C)`` input yields ``(H'*W', k*k, C)``; a leading batch axis is
    carried through. Cells that fall on the padding ring are exact zeros.
    Under ``(3, 1, 1)`` the center cell (flat index 4) of window ``(i, j)``
    is token ``(i, j)``.
    """
    from .ops import zero_pad2d

    tx = _t(x)
    if tx.ndim not in (3, 4):
        raise ShapeError(f"unfold_windows: need (H, W, C) or (B, H, W, C), got {tx.shape}")
    batched = tx.ndim == 4
    H, W, C = tx.shape[-3], tx.shape[-2], tx.shape[-1]
    Hn, Wn = window_count(H, W, spec)
    x4 = x if batched else reshape(x, (1, H, W, C))
    xp = zero_pad2d(x4, spec.p)
    grid = _unfold_grid(_t(xp), spec.k, spec.s, Hn, Wn)
    if batched:
        return reshape(grid, (tx.shape[0], Hn * Wn, spec.k * spec.k, C))
    return reshape(grid, (Hn * Wn, spec.k * spec.k, C))


def csa(q, K, V) -> Tensor:
    """Central self-attention for one window and one head.

    ``q`` is the ``(1, dh)`` query of the central token; ``K`` and ``V``
    are the window's ``(n, dh)`` keys and values. The score row
    ``q @ K.T / sqrt(dh)`` is softmax-normalized and applied as weights
    over the rows of ``V``, so the output is a convex combination of them.
    """
    tq, tK, tV = _t(q), _t(K), _t(V)
    if tq.ndim != 2 or tq.shape[0] != 1:
        raise ShapeError(f"csa: query must be (1, dh), got {tq.shape}")
    if tK.ndim != 2 or tV.ndim != 2 or tK.shape != tV.shape:
        raise ShapeError(f"csa: K {tK.shape} and V {tV.shape} must match (n, dh)")
    if tK.shape[0] < 1 or tK.shape[1] != tq.shape[1]:
        raise ShapeError(f"csa: K {tK.shape} incompatible with query {tq.shape}")
    dh = tq.shape[1]
    scores = scale(matmul(q, transpose(K, (1, 0))), 1.0 / math.sqrt(dh))
    return matmul(softmax_lastdim(scores), V)


def sa_global(Q, K, V, pos_bias=None) -> Tensor:
    """All-pairs self-attention for one head over ``(N, dh)`` projections.

    ``softmax(Q K.T / sqrt(dh) + B) V`` with ``B = 0`` when ``pos_bias`` is
    absent (the default; no position encoding is required).
    """
    tQ, tK, tV = _t(Q), _t(K), _t(V)
    if tQ.ndim != 2 or tQ.shape != tK.shape or tK.shape != tV.shape:
        raise ShapeError(
            f"sa_global: Q {tQ.shape}, K {tK.shape}, V {tV.shape} must all be (N, dh)"
        )
    N, dh = tQ.shape
    scores = scale(matmul(Q, transpose(K, (1, 0))), 1.0 / math.sqrt(dh))
    if pos_bias is not None:
        tb = _t(pos_bias)
        if tb.shape != (N, N):
            raise ShapeError(f"sa_global: pos_bias {tb.shape} != ({N}, {N})")
        scores = add(scores, pos_bias)
    return matmul(softmax_lastdim(scores), V)


def _as_batched(x: Tensor):
    if x.ndim == 4:
        return x, True
    if x.ndim == 3:
        return reshape(x, (1, *x.shape)), False
    raise ShapeError(f"expected (H, W, d) or (B, H, W, d), got {x.shape}")


def mcsa(x, params: AttentionParams, spec: WindowSpec = WindowSpec()) -> Tensor:
    """Multi-head central self-attention over sliding windows.

    Every token projects its own per-head query; its window's ``k*k``
    tokens (zero padding included) project to per-head keys and values.
    Padding cells enter the window before projection, so their keys and
    values are the projection biases alone. Heads are concatenated and
    mixed by ``wo``. The window spec must preserve resolution.
    """
    from .ops import zero_pad2d

    tx = _t(x)
    x4, batched = _as_batched(tx if isinstance(x, Tensor) else _t(x))
    # re-wrap through the original object so parameter gradients track x
    x4 = x if tx.ndim == 4 else reshape(x, (1, *tx.shape))
    B, H, W, d = _t(x4).shape
    if d != params.width:
        raise ShapeError(f"mcsa: map width {d} != params width {params.width}")
    if window_count(H, W, spec) != (H, W):
        raise GeometryError(
            f"mcsa: window spec (k={spec.k}, p={spec.p}, s={spec.s}) does not"
            f" preserve the {H}x{W} resolution"
        )
    h, dh, n = params.heads, params.head_width, spec.k * spec.k

    q = linear(x4, params.wq, params.bq)
    q = reshape(q, (B, H, W, h, 1, dh))
    xp = zero_pad2d(x4, spec.p)
    kwin = _unfold_grid(_t(linear(xp, params.wk, params.bk)), spec.k, spec.s, H, W)
    vwin = _unfold_grid(_t(linear(xp, params.wv, params.bv)), spec.k, spec.s, H, W)
    kwin = transpose(reshape(kwin, (B, H, W, n, h, dh)), (0, 1, 2, 4, 5, 3))
    vwin = transpose(reshape(vwin, (B, H, W, n, h, dh)), (0, 1, 2, 4, 3, 5))
    scores = scale(bmm(q, kwin), 1.0 / math.sqrt(dh))  # (B, H, W, h, 1, n)
    mixed = bmm(softmax_lastdim(scores), vwin)  # (B, H, W, h, 1, dh)
    y = linear(reshape(mixed, (B, H, W, d)), params.wo, params.bo)
    return y if batched else reshape(y, (H, W, d))


def msa(x, params: AttentionParams) -> Tensor:
    """Conventional multi-head self-attention over all tokens of a map."""
    tx = _t(x)
    x4 = x if tx.ndim == 4 else reshape(x, (1, *tx.shape))
    B, H, W, d = _t(x4).shape
    if d != params.width:
        raise ShapeError(f"msa: map width {d} != params width {params.width}")
    h, dh, N = params.heads, params.head_width, H * W

    tokens = reshape(x4, (B, N, d))

    def split(t):  # (B, N, d) -> (B, h, N, dh)
        return transpose(reshape(t, (B, N, h, dh)), (0, 2, 1, 3))

    q = split(linear(tokens, params.wq, params.bq))
    k = split(linear(tokens, params.wk, params.bk))
    v = split(linear(tokens, params.wv, params.bv))
    scores = scale(bmm(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if params.pos_bias is not None:
        tb = _t(params.pos_bias)
        if tb.shape != (N, N):
            raise ShapeError(f"msa: pos_bias {tb.shape} != ({N}, {N})")
        scores = add(scores, params.pos_bias)
    mixed = bmm(softmax_lastdim(scores), v)  # (B, h, N, dh)
    mixed = reshape(transpose(mixed, (0, 2, 1, 3)), (B, N, d))
    y = reshape(linear(mixed, params.wo, params.bo), (B, H, W, d))
    return y if tx.ndim == 4 else reshape(y, (H, W, d))


def mcsa_reference(x, params: AttentionParams, spec: WindowSpec = WindowSpec()) -> Tensor:
    """Naive per-window route kept as the verification oracle for ``mcsa``.

    Unfolds the map, then for every window and head slices the projection
    matrices, projects the central token and the window tokens separately,
    and calls :func:`csa`. Slow, but independent of the vectorized path.
    """
    tx = _t(x)
    if tx.ndim != 3:
        raise ShapeError(f"mcsa_reference: need (H, W, d), got {tx.shape}")
    H, W, d = tx.shape
    if window_count(H, W, spec) != (H, W):
        raise GeometryError("mcsa_reference: spec does not preserve resolution")
    h, dh = params.heads, params.head_width
    win = _t(unfold_windows(x, spec)).data  # (H*W, k*k, d)
    wq, wk, wv = params.wq.value.data, params.wk.value.data, params.wv.value.data
    bq, bk, bv = params.bq.value.data, params.bk.value.data, params.bv.value.data
    out = np.empty((H * W, d), dtype=tx.dtype)
    for idx in range(H * W):
        center = tx.data[idx // W, idx % W][None, :]  # (1, d)
        for head in range(h):
            sl = slice(head * dh, (head + 1) * dh)
            qh = Tensor(center @ wq[:, sl] + bq[sl])
            Kh = Tensor(win[idx] @ wk[:, sl] + bk[sl])
            Vh = Tensor(win[idx] @ wv[:, sl] + bv[sl])
            out[idx, sl] = _t(csa(qh, Kh, Vh)).data[0]
    y = out @ params.wo.value.data + params.bo.value.data
    return Tensor(y.reshape(H, W, d))
