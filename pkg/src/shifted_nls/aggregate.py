"""Aggregation of search results: softmax weights, weighted patch sums, stacking.

For query ``i`` at ``(t, h, w)`` with neighbors ``l`` at offsets
``(dt, dh, dw)`` the patch pixel ``(ph, pw)`` contributes
``weights[i, l] * V(t + dt, h + dh + ph, w + dw + pw)`` to output pixel
``(t, h + ph, w + pw)``. Reads are bilinear with reflection; writes that
fall outside the frame are discarded. Each output pixel is divided by the
number of ``(query, patch pixel)`` pairs that wrote to it; the ``L``
neighbors of one query count once together since their weights sum to 1.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, DomainError
from .search import SearchConfig, query_grid
from .tensor_core import accumulate, as_video, bilinear_scatter_terms, gather_bilinear, patch_offsets


def softmax_rows(scores, beta: float = 1.0) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise DomainError("softmax_rows needs finite scores")
    z = beta * s
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(grad_weights, weights, beta: float = 1.0) -> np.ndarray:
    g = np.asarray(grad_weights, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    return beta * w * (g - (g * w).sum(-1, keepdims=True))


def contribution_counts(shape, cfg: SearchConfig) -> np.ndarray:
    """Number of ``(query, patch pixel)`` writes landing on each ``(t, h, w)``."""
    T, H, W = shape[:3]
    counts = np.zeros((T, H, W), dtype=np.int64)
    r = cfg.ps // 2
    hs = np.arange(0, H, cfg.stride0)
    ws = np.arange(0, W, cfg.stride0)
    rows = np.zeros(H, dtype=np.int64)
    cols = np.zeros(W, dtype=np.int64)
    for p in range(-r, r + 1):
        y = hs + p
        np.add.at(rows, y[(y >= 0) & (y < H)], 1)
        x = ws + p
        np.add.at(cols, x[(x >= 0) & (x < W)], 1)
    counts[:] = rows[:, None] * cols[None, :]
    return counts


def _prepare(V, weights, offsets, cfg):
    V = as_video(V)
    T, H, W, F = V.shape
    ts, hs, wws = query_grid(T, H, W, cfg.stride0)
    weights = np.asarray(weights, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[0] != ts.size:
        raise DomainError(f"weights must be ({ts.size}, L), got {weights.shape}")
    if offsets.shape != weights.shape + (3,):
        raise DomainError(f"offsets must be {weights.shape + (3,)}, got {offsets.shape}")
    kt = ts[:, None] + offsets[..., 0].astype(np.int64)
    if kt.min() < 0 or kt.max() >= T:
        raise DomainError("offsets point outside the clip in time")
    if not cfg.covers_all_pixels:
        raise ConfigError(f"stride0={cfg.stride0} leaves holes with ps={cfg.ps}; "
                          f"need stride0 <= {(cfg.ps + 1) // 2}")
    return V, weights, offsets, (ts, hs, wws, kt)


def _patch_terms(V, offsets, grid, ph, pw):
    """Bilinear reads for patch pixel ``(ph, pw)`` plus the in-frame write targets."""
    _, H, W, _ = V.shape
    ts, hs, wws, kt = grid
    y = (hs[:, None] + offsets[..., 1]) + ph
    x = (wws[:, None] + offsets[..., 2]) + pw
    ty = hs + ph
    tx = wws + pw
    inside = (ty >= 0) & (ty < H) & (tx >= 0) & (tx < W)
    return y, x, inside, ((ts * H + ty) * W + tx)


def _scatter(size, F, target, inside, vals):
    ch = np.arange(F)
    idx = (target[inside] * F)[:, None] + ch
    return accumulate(size, idx.ravel(), vals[inside].ravel())


def _check_counts(counts):
    if counts.min() < 1:
        raise AssertionError("aggregation left a pixel without contributions")


def wpsum(V, weights, offsets, cfg: SearchConfig) -> np.ndarray:
    """Weighted non-local patch sum normalized by per-pixel contribution counts."""
    V, weights, offsets, grid = _prepare(V, weights, offsets, cfg)
    T, H, W, F = V.shape
    acc = np.zeros(V.size)
    for ph, pw in patch_offsets(cfg.ps):
        y, x, inside, target = _patch_terms(V, offsets, grid, ph, pw)
        vals = gather_bilinear(V, grid[3], y, x)
        contrib = (weights[..., None] * vals).sum(1)
        acc += _scatter(V.size, F, target, inside, contrib)
    counts = contribution_counts(V.shape, cfg)
    _check_counts(counts)
    return (acc.reshape(V.shape) / counts[..., None]).astype(V.dtype)


def gather_stack(V, weights, offsets, cfg: SearchConfig, *, normalize: bool = True) -> np.ndarray:
    """Per-neighbor aggregates of shape ``(L, T, H, W, F)``.

    Slice ``l`` scatters only neighbor ``l``, scaled by ``weights[:, l]``.
    With ``normalize`` each slice is divided by the contribution counts, so
    the slices sum to :func:`wpsum`; without it they sum to its accumulator.
    """
    V, weights, offsets, grid = _prepare(V, weights, offsets, cfg)
    T, H, W, F = V.shape
    L = weights.shape[1]
    stack = np.zeros((L, V.size))
    for ph, pw in patch_offsets(cfg.ps):
        y, x, inside, target = _patch_terms(V, offsets, grid, ph, pw)
        vals = gather_bilinear(V, grid[3], y, x)
        for l in range(L):
            stack[l] += _scatter(V.size, F, target, inside, weights[:, l, None] * vals[:, l])
    stack = stack.reshape((L,) + V.shape)
    if normalize:
        counts = contribution_counts(V.shape, cfg)
        _check_counts(counts)
        stack = stack / counts[..., None]
    return stack.astype(V.dtype)


def wpsum_backward(grad_out, V, weights, offsets, cfg: SearchConfig):
    """Vector-Jacobian product of :func:`wpsum`: returns ``(dV, dWeights)``."""
    V, weights, offsets, grid = _prepare(V, weights, offsets, cfg)
    T, H, W, F = V.shape
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != V.shape:
        raise DomainError(f"grad_out shape {g.shape} != video shape {V.shape}")
    counts = contribution_counts(V.shape, cfg)
    _check_counts(counts)
    g_acc = (g / counts[..., None]).reshape(-1, F)
    dW = np.zeros_like(weights)
    idx, val = [], []
    for ph, pw in patch_offsets(cfg.ps):
        y, x, inside, target = _patch_terms(V, offsets, grid, ph, pw)
        gt = np.where(inside[:, None], g_acc[np.where(inside, target, 0)], 0.0)
        vals = gather_bilinear(V, grid[3], y, x)
        dW += (vals * gt[:, None, :]).sum(-1)
        i, v = bilinear_scatter_terms(V.shape, grid[3], y, x, weights[..., None] * gt[:, None, :])
        idx.append(i)
        val.append(v)
    dV = accumulate(V.size, np.concatenate(idx), np.concatenate(val)).reshape(V.shape)
    return dV, dW
