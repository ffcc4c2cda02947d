"""Predicted offsets: Middlebury ``.flo`` I/O, block matching, composition.

Flow fields are arrays of shape ``(H, W, 2)`` (one frame) or
``(T, H, W, 2)`` holding ``(dy, dx)`` displacements in pixels. A forward
flow at frame ``t`` points into ``t + 1``; a backward flow into ``t - 1``.
``.flo`` files store ``(u, v) = (dx, dy)``; the swap happens only in
:func:`read_flo` and :func:`write_flo`.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, FormatError
from .tensor_core import (accumulate, bilinear_coord_grad, bilinear_scatter_terms,
                          gather_bilinear, reflect_index)

FLO_MAGIC = 202021.25
_FLO_HEADER = struct.Struct("<fii")
_MAX_FLO_DIM = 1 << 16


def read_flo(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < _FLO_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, width, height = _FLO_HEADER.unpack_from(buf)
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if not (0 < width <= _MAX_FLO_DIM):
        raise FormatError(f"{path}: nonsensical width {width}")
    if not (0 < height <= _MAX_FLO_DIM):
        raise FormatError(f"{path}: nonsensical height {height}")
    need = 2 * width * height * 4
    if len(buf) - _FLO_HEADER.size < need:
        raise FormatError(f"{path}: truncated payload ({len(buf) - _FLO_HEADER.size} of {need} bytes)")
    uv = np.frombuffer(buf, dtype="<f4", count=2 * width * height, offset=_FLO_HEADER.size)
    uv = uv.reshape(height, width, 2)
    return np.ascontiguousarray(uv[..., ::-1]).astype(np.float32)


def write_flo(flow, path) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[-1] != 2:
        raise DomainError(f"flow must have shape (H, W, 2), got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise DomainError("flow contains non-finite values")
    H, W, _ = flow.shape
    with open(path, "wb") as fh:
        fh.write(_FLO_HEADER.pack(FLO_MAGIC, W, H))
        fh.write(np.ascontiguousarray(flow[..., ::-1]).astype("<f4").tobytes())


def read_flo_dir(path) -> np.ndarray:
    """Stack the lexicographically sorted ``.flo`` files of a directory into ``(T, H, W, 2)``."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix == ".flo")
    if not files:
        raise FileNotFoundError(f"{path}: no .flo files")
    flows = []
    for f in files:
        fl = read_flo(f)
        if flows and fl.shape != flows[0].shape:
            raise FormatError(f"{f}: flow shape {fl.shape} differs from {flows[0].shape}")
        flows.append(fl)
    return np.stack(flows)


def write_flo_dir(flows, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for t, fl in enumerate(np.asarray(flows)):
        write_flo(fl, path / f"{t:05d}.flo")


def _as_frame(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise DomainError(f"frame must be (H, W) or (H, W, F), got {a.shape}")
    return a


def estimate_flow_block_matching(frame_a, frame_b, block: int = 5, radius: int = 4) -> np.ndarray:
    """Integer SSD block matching from ``frame_a`` to ``frame_b``.

    Frames are tiled into ``block x block`` tiles; each tile exhaustively
    tries displacements in ``[-radius, radius]^2`` and keeps the smallest SSD
    (zero displacement first, then ascending ``dy``, ``dx``). Pixels take the
    displacement of their tile. Out-of-frame reads are reflected.
    """
    if int(block) != block or block < 1 or block % 2 == 0:
        raise ConfigError(f"block must be a positive odd integer, got {block}")
    if int(radius) != radius or radius < 0:
        raise ConfigError(f"radius must be a nonnegative integer, got {radius}")
    a = _as_frame(frame_a)
    b = _as_frame(frame_b)
    if a.shape != b.shape:
        raise DomainError(f"frame shapes differ: {a.shape} vs {b.shape}")
    H, W, _ = a.shape
    nby = -(-H // block)
    nbx = -(-W // block)
    py = np.arange(nby * block)
    px = np.arange(nbx * block)
    A = a[np.ix_(reflect_index(py, H), reflect_index(px, W))]
    best = np.full((nby, nbx), np.inf)
    best_d = np.zeros((nby, nbx, 2))
    cands = [(0, 0)] + [(dy, dx) for dy in range(-radius, radius + 1)
                        for dx in range(-radius, radius + 1) if (dy, dx) != (0, 0)]
    for dy, dx in cands:
        B = b[np.ix_(reflect_index(py + dy, H), reflect_index(px + dx, W))]
        ssd = ((A - B) ** 2).sum(-1).reshape(nby, block, nbx, block).sum(axis=(1, 3))
        better = ssd < best
        best[better] = ssd[better]
        best_d[better] = (dy, dx)
    iy = np.arange(H) // block
    ix = np.arange(W) // block
    return best_d[np.ix_(iy, ix)]


def estimate_video_flows(video, block: int = 5, radius: int = 4):
    """Forward and backward block-matching flows for every frame of ``video``.

    Returns ``(fflow, bflow)`` of shape ``(T, H, W, 2)``; entries that would
    point outside the clip are zero.
    """
    video = np.asarray(video)
    T, H, W, _ = video.shape
    fflow = np.zeros((T, H, W, 2))
    bflow = np.zeros((T, H, W, 2))
    for t in range(T - 1):
        fflow[t] = estimate_flow_block_matching(video[t], video[t + 1], block, radius)
        bflow[t + 1] = estimate_flow_block_matching(video[t + 1], video[t], block, radius)
    return fflow, bflow


def _check_flow_list(flows):
    if len(flows) == 0:
        raise ConfigError("compose_flow needs at least one flow")
    flows = [np.asarray(f, dtype=np.float64) for f in flows]
    shape = flows[0].shape
    for f in flows:
        if f.ndim != 3 or f.shape[-1] != 2 or f.shape != shape:
            raise DomainError(f"flows must share shape (H, W, 2), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise DomainError("flow contains non-finite values")
    return flows


def compose_flow(flows) -> np.ndarray:
    """Chain single-step fields: ``total(p) = d1(p) + d2(p + d1(p)) + ...``.

    Later fields are read bilinearly (reflected at borders) at the displaced
    position.
    """
    flows = _check_flow_list(flows)
    H, W, _ = flows[0].shape
    gy, gx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64),
                         indexing="ij")
    total = flows[0].copy()
    for f in flows[1:]:
        total = total + gather_bilinear(f[None], 0, gy + total[..., 0], gx + total[..., 1])
    return total


def compose_flow_backward(flows, grad_total) -> list[np.ndarray]:
    """Vector-Jacobian product of :func:`compose_flow` for each input field."""
    flows = _check_flow_list(flows)
    H, W, _ = flows[0].shape
    gy, gx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64),
                         indexing="ij")
    # forward replay: position before reading each field
    positions = [(gy, gx)]
    total = flows[0].copy()
    for f in flows[1:]:
        py, px = gy + total[..., 0], gx + total[..., 1]
        positions.append((py, px))
        total = total + gather_bilinear(f[None], 0, py, px)
    g_total = np.asarray(grad_total, dtype=np.float64)
    g_pos = np.zeros_like(g_total)
    grads = [None] * len(flows)
    for k in range(len(flows) - 1, -1, -1):
        g_d = g_total + g_pos
        py, px = positions[k]
        grads[k] = accumulate(H * W * 2, *bilinear_scatter_terms(
            (1, H, W, 2), 0, py, px, g_d)).reshape(H, W, 2)
        if k > 0:
            jy, jx = bilinear_coord_grad(flows[k][None], 0, py, px, g_d)
            g_pos = g_pos + np.stack([jy, jx], -1)
    return grads


def mean_abs_flow(flow) -> float:
    flow = np.asarray(flow, dtype=np.float64)
    if flow.size == 0:
        raise DomainError("empty flow field")
    return float(np.mean(np.abs(flow)))
