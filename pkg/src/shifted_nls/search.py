"""Non-local search and shifted non-local search with an exact backward pass.

Queries sit on an integer grid of stride ``stride0``. Each query compares
its ``ps x ps`` patch with key patches at ``ws x ws`` grid points spaced
``stride1`` apart, centered on the query (plain search) or on the query
displaced by a predicted offset (shifted search), in every frame of the
temporal window ``t - wt .. t + wt``. Key coordinates may be fractional and
are read bilinearly; spatial borders reflect.

Window slots are scanned in the order ``dt = 0, -1, +1, -2, +2, ...``,
then window row, then window column. The scan index breaks ties in top-L
selection. Slots whose frame falls outside the clip are dropped (score
``-inf``, never selected).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .flow import compose_flow, compose_flow_backward
from .memory import MemoryMeter, NullMeter
from .tensor_core import (accumulate, as_video, bilinear_coord_grad, bilinear_corners,
                          bilinear_scatter_terms, gather_bilinear, patch_offsets, reflect_index)

METRICS = {"ip": "ip", "inner-product": "ip", "l2": "l2", "negative-squared-L2": "l2"}

# queries per work unit; fixed so results never depend on the thread count
CHUNK = 16384
# elements per gathered key block, bounds transient memory in full-grid mode
_BLOCK_ELEMS = 1 << 21


@dataclass(frozen=True)
class SearchConfig:
    ws: int
    wt: int = 0
    ps: int = 1
    stride0: int = 1
    stride1: float = 1.0
    topl: int = 1
    metric: str = "l2"
    softmax_scale: float = 1.0

    def __post_init__(self):
        for name in ("ws", "ps"):
            v = getattr(self, name)
            if int(v) != v or v < 1 or v % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd integer, got {v}")
        if int(self.wt) != self.wt or self.wt < 0:
            raise ConfigError(f"wt must be a nonnegative integer, got {self.wt}")
        if int(self.stride0) != self.stride0 or self.stride0 < 1:
            raise ConfigError(f"stride0 must be a positive integer, got {self.stride0}")
        if not (math.isfinite(self.stride1) and self.stride1 > 0):
            raise ConfigError(f"stride1 must be a positive real, got {self.stride1}")
        if int(self.topl) != self.topl or not 1 <= self.topl <= self.nslots:
            raise ConfigError(f"topl must be in [1, {self.nslots}], got {self.topl}")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}")
        object.__setattr__(self, "metric", METRICS[self.metric])

    @property
    def nframes(self) -> int:
        return 2 * self.wt + 1

    @property
    def nslots(self) -> int:
        return self.nframes * self.ws * self.ws

    @property
    def stride_condition(self) -> bool:
        """``(ps - 1) // 2 < stride0``, the patch/query-stride condition as usually quoted."""
        return (self.ps - 1) // 2 < self.stride0

    @property
    def covers_all_pixels(self) -> bool:
        """Whether patches on the query grid reach every pixel for any frame size."""
        return self.stride0 <= (self.ps + 1) // 2

    @property
    def window_radius(self) -> float:
        """Largest displacement of a grid point from the window center."""
        return self.stride1 * (self.ws // 2)

    def replace(self, **kw) -> "SearchConfig":
        d = asdict(self)
        d.update(kw)
        return SearchConfig(**d)


def temporal_order(wt: int) -> list[int]:
    order = [0]
    for k in range(1, wt + 1):
        order += [-k, k]
    return order


def query_grid(T: int, H: int, W: int, stride0: int):
    """Query coordinates ``(t, h, w)`` in t-major, then row, then column order."""
    hs = np.arange(0, H, stride0)
    ws = np.arange(0, W, stride0)
    t, h, w = np.meshgrid(np.arange(T), hs, ws, indexing="ij")
    return t.ravel(), h.ravel(), w.ravel()


def num_queries(shape, stride0: int) -> int:
    T, H, W = shape[:3]
    return T * ((H - 1) // stride0 + 1) * ((W - 1) // stride0 + 1)


@dataclass
class SearchTape:
    """Saved state of a forward pass, enough to replay the selected scores.

    ``coords`` holds query ``(t, h, w)``; ``key_t``/``key_y``/``key_x`` the
    key frame and fractional window-point coordinates per selection;
    ``plane`` the temporal slot. ``corners``/``weights`` are the reflected
    bilinear source pixels ``(iy0, iy1, ix0, ix1)`` and the fractional parts
    ``(ay, ax)`` for every patch pixel, shaped ``(nQ, L, P*P, ...)``.
    """
    cfg: SearchConfig
    shape: tuple
    coords: np.ndarray
    key_t: np.ndarray
    key_y: np.ndarray
    key_x: np.ndarray
    plane: np.ndarray
    corners: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    mode: str
    flows: tuple


# -- plan construction --

def _check_flow(flow, shape, name):
    T, H, W, _ = shape
    if flow is None:
        return None
    flow = np.asarray(flow)
    if flow.shape != (T, H, W, 2):
        raise DomainError(f"{name} must have shape {(T, H, W, 2)}, got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise DomainError(f"{name} contains non-finite values")
    return flow


def _shifted_plan(shape, cfg, fflow, bflow):
    T, H, W, _ = shape
    order = temporal_order(cfg.wt)
    key_t = np.full((T, len(order)), -1, dtype=np.int64)
    shifts = np.zeros((T, len(order), H, W, 2))
    for t in range(T):
        for k, dt in enumerate(order):
            if not 0 <= t + dt < T:
                continue
            key_t[t, k] = t + dt
            chain = _flow_chain(t, dt, fflow, bflow)
            if chain:
                shifts[t, k] = compose_flow(chain)
    return key_t, np.asarray(order, dtype=np.float64), shifts


def _flow_chain(t, dt, fflow, bflow):
    if dt > 0 and fflow is not None:
        return [fflow[t + j] for j in range(dt)]
    if dt < 0 and bflow is not None:
        return [bflow[t - j] for j in range(-dt)]
    return []


def _check_topl(key_t, cfg):
    valid = (key_t >= 0).sum(1).min() * cfg.ws * cfg.ws
    if cfg.topl > valid:
        raise ConfigError(f"topl={cfg.topl} exceeds the {valid} in-clip window slots")


# -- forward engine --

def _similarity_block(Q, K, cfg, ts, hs, wws, kt, ky, kx):
    """Scores of queries ``(n,)`` against window points ``(n, B)``."""
    _, H, W, F = Q.shape
    acc = np.zeros(ky.shape, dtype=np.result_type(Q.dtype, K.dtype))
    for ph, pw in patch_offsets(cfg.ps):
        qv = Q[ts, reflect_index(hs + ph, H), reflect_index(wws + pw, W)][:, None, :]
        kv = gather_bilinear(K, kt, ky + ph, kx + pw)
        if cfg.metric == "ip":
            prod = qv * kv
        else:
            d = qv - kv
            prod = d * d
        for c in range(F):
            acc += prod[..., c]
    return acc if cfg.metric == "ip" else -acc


def _merge_topl(best, new, L):
    """Append ``new`` block to ``best`` and keep the top ``L`` (stable)."""
    if best is None:
        vals, offs, slots = new
    else:
        vals = np.concatenate([best[0], new[0]], 1)
        offs = np.concatenate([best[1], new[1]], 1)
        slots = np.concatenate([best[2], new[2]], 1)
    order = np.argsort(-vals, axis=1, kind="stable")[:, :L]
    return (np.take_along_axis(vals, order, 1),
            np.take_along_axis(offs, order[..., None], 1),
            np.take_along_axis(slots, order, 1))


def _run_chunk(Q, K, cfg, plan, ts, hs, wws, mode, meter):
    key_t, dts, shifts = plan
    n = ts.size
    ws, F = cfg.ws, Q.shape[-1]
    r = ws // 2
    grid = cfg.stride1 * (np.arange(ws) - r)
    nplanes = len(dts)
    N = nplanes * ws * ws
    itemsize = np.result_type(Q.dtype, K.dtype).itemsize
    if mode == "fused":
        rows = 1
    else:
        rows = max(1, min(ws, _BLOCK_ELEMS // max(1, n * ws * F)))
    if mode != "fused":
        vals_full = np.empty((n, N), dtype=np.result_type(Q.dtype, K.dtype))
        offs_full = np.empty((n, N, 3))
        meter.alloc(vals_full.nbytes + offs_full.nbytes)
    best = None
    for k in range(nplanes):
        kt = key_t[ts, k]
        valid = kt >= 0
        kt = np.where(valid, kt, 0)
        sh = shifts[ts, k, hs, wws]
        for a0 in range(0, ws, rows):
            a1 = min(ws, a0 + rows)
            B = (a1 - a0) * ws
            dh = np.broadcast_to(sh[:, 0, None, None] + grid[None, a0:a1, None],
                                 (n, a1 - a0, ws)).reshape(n, B)
            dw = np.broadcast_to(sh[:, 1, None, None] + grid[None, None, :],
                                 (n, a1 - a0, ws)).reshape(n, B)
            ky = hs[:, None] + dh
            kx = wws[:, None] + dw
            # transient: coordinates, gathered key values, products, scores, offsets
            tmp = n * B * (4 * 8 + 3 * F * itemsize + itemsize + 3 * 8)
            with meter.hold(tmp):
                vals = _similarity_block(Q, K, cfg, ts, hs, wws, kt[:, None], ky, kx)
                vals[~valid] = -np.inf
                offs = np.stack([np.broadcast_to(dts[k], (n, B)), dh, dw], -1)
                slots = np.broadcast_to(k * ws * ws + a0 * ws + np.arange(B), (n, B))
                if mode == "fused":
                    prev = 0 if best is None else sum(x.nbytes for x in best)
                    with meter.hold(n * (cfg.topl + B) * (2 * itemsize + 3 * 8 + 2 * 8)):
                        best = _merge_topl(best, (vals, offs, slots), cfg.topl)
                    meter.free(prev)
                    meter.alloc(sum(x.nbytes for x in best))
                else:
                    s0 = k * ws * ws + a0 * ws
                    vals_full[:, s0:s0 + B] = vals
                    offs_full[:, s0:s0 + B] = offs
    if mode == "full":
        return vals_full, offs_full
    if mode == "fused":
        return best
    with meter.hold(n * N * 8 * 2):
        order = np.argsort(-vals_full, axis=1, kind="stable")[:, :cfg.topl]
    return (np.take_along_axis(vals_full, order, 1),
            np.take_along_axis(offs_full, order[..., None], 1),
            order)


def _run(Q, K, cfg, plan, mode, threads, meter):
    T, H, W, _ = Q.shape
    ts, hs, wws = query_grid(T, H, W, cfg.stride0)
    nq = ts.size
    meter = meter if meter is not None else NullMeter()
    meter.alloc(plan[0].nbytes + plan[2].nbytes)
    bounds = [(s, min(nq, s + CHUNK)) for s in range(0, nq, CHUNK)]

    def work(b):
        m = MemoryMeter()
        s, e = b
        return _run_chunk(Q, K, cfg, plan, ts[s:e], hs[s:e], wws[s:e], mode, m), m.peak

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, bounds))
    else:
        results = [work(b) for b in bounds]
    # charged for the fixed sequential chunk schedule so reports do not depend on threads
    meter.merge_concurrent([p for _, p in results], 1)
    meter.free(plan[0].nbytes + plan[2].nbytes)
    parts = [r for r, _ in results]
    out = tuple(np.concatenate([p[i] for p in parts], 0) for i in range(len(parts[0])))
    return (ts, hs, wws), out


def _build_tape(cfg, shape, coords, plan, offs, slots, vals, mode, flows):
    key_t, _, _ = plan
    ts, hs, wws = coords
    _, H, W, _ = shape
    plane = slots // (cfg.ws * cfg.ws)
    kt = key_t[ts[:, None], plane]
    ky = hs[:, None] + offs[..., 1]
    kx = wws[:, None] + offs[..., 2]
    corners, weights = [], []
    for ph, pw in patch_offsets(cfg.ps):
        iy0, iy1, ix0, ix1, ay, ax = bilinear_corners(ky + ph, kx + pw, H, W)
        corners.append(np.stack([iy0, iy1, ix0, ix1], -1))
        weights.append(np.stack([ay, ax], -1))
    return SearchTape(cfg=cfg, shape=tuple(shape), coords=np.stack(coords, -1),
                      key_t=kt, key_y=ky, key_x=kx, plane=plane,
                      corners=np.stack(corners, 2), weights=np.stack(weights, 2),
                      values=vals, mode=mode, flows=flows)


def _prepare(Q, K):
    Q = as_video(Q)
    K = as_video(K)
    if Q.shape != K.shape:
        raise DomainError(f"Q and K shapes differ: {Q.shape} vs {K.shape}")
    return Q, K


def shifted_nls_forward(Q, K, fflow=None, bflow=None, cfg: SearchConfig = None, *,
                        fused: bool = False, threads: int = 1, meter=None):
    """Top-L scores, offsets ``(dt, dh, dw)`` and a tape for the shifted search.

    The window for frame ``t + dt`` is centered on the query displaced by
    the forward (``dt > 0``) or backward (``dt < 0``) flow, chained through
    intermediate frames for ``|dt| > 1``. ``dt = 0`` is never shifted.
    ``fused`` keeps a running top-L instead of the full score grid.
    """
    Q, K = _prepare(Q, K)
    fflow = _check_flow(fflow, Q.shape, "fflow")
    bflow = _check_flow(bflow, Q.shape, "bflow")
    plan = _shifted_plan(Q.shape, cfg, fflow, bflow)
    _check_topl(plan[0], cfg)
    coords, (vals, offs, slots) = _run(Q, K, cfg, plan, "fused" if fused else "topl",
                                       threads, meter)
    tape = _build_tape(cfg, Q.shape, coords, plan, offs, slots, vals, "shifted", (fflow, bflow))
    return vals, offs, tape


def nls_forward(Q, K, cfg: SearchConfig, *, fused: bool = False, threads: int = 1, meter=None):
    """Unshifted search: every window is centered on the query coordinate."""
    Q, K = _prepare(Q, K)
    plan = _shifted_plan(Q.shape, cfg, None, None)
    _check_topl(plan[0], cfg)
    coords, (vals, offs, slots) = _run(Q, K, cfg, plan, "fused" if fused else "topl",
                                       threads, meter)
    tape = _build_tape(cfg, Q.shape, coords, plan, offs, slots, vals, "shifted", (None, None))
    return vals, offs, tape


def paired_search(Q, K, flow, cfg: SearchConfig, *, fused: bool = False, threads: int = 1,
                  meter=None):
    """Frame-paired shifted search: query frame ``t`` searches key frame ``t`` only.

    The window is centered on the query displaced by ``flow[t]``; offsets
    carry ``dt = 0``. Used to align frame ``t`` to frame ``t + 1`` by passing
    ``Q = X[:-1]``, ``K = X[1:]`` and the forward flows. ``cfg.wt`` is ignored.
    """
    Q, K = _prepare(Q, K)
    T, H, W, _ = Q.shape
    if flow is None:
        flow = np.zeros((T, H, W, 2))
    flow = _check_flow(flow, Q.shape, "flow")
    cfg = cfg.replace(wt=0) if cfg.wt else cfg
    plan = (np.arange(T, dtype=np.int64)[:, None], np.zeros(1),
            np.asarray(flow, dtype=np.float64)[:, None])
    coords, (vals, offs, slots) = _run(Q, K, cfg, plan, "fused" if fused else "topl",
                                       threads, meter)
    tape = _build_tape(cfg, Q.shape, coords, plan, offs, slots, vals, "paired", (flow,))
    return vals, offs, tape


def shifted_nls_full(Q, K, fflow=None, bflow=None, cfg: SearchConfig = None, *,
                     threads: int = 1, meter=None):
    """Full score grid ``(nQ, W_t, ws, ws)`` and offsets ``(nQ, W_t, ws, ws, 3)``.

    Axis 1 follows the temporal scan order; dropped frames score ``-inf``.
    """
    Q, K = _prepare(Q, K)
    fflow = _check_flow(fflow, Q.shape, "fflow")
    bflow = _check_flow(bflow, Q.shape, "bflow")
    plan = _shifted_plan(Q.shape, cfg, fflow, bflow)
    _, (vals, offs) = _run(Q, K, cfg, plan, "full", threads, meter)
    n = vals.shape[0]
    shape = (n, cfg.nframes, cfg.ws, cfg.ws)
    return vals.reshape(shape), offs.reshape(shape + (3,))


def top_l(values, offsets, L: int):
    """Per-row best ``L`` entries (larger is better), ties in scan order."""
    values = np.asarray(values)
    n = values.shape[0]
    flat = values.reshape(n, -1)
    offs = np.asarray(offsets).reshape(n, flat.shape[1], -1)
    if int(L) != L or not 1 <= L <= flat.shape[1]:
        raise ConfigError(f"L must be in [1, {flat.shape[1]}], got {L}")
    order = np.argsort(-flat, axis=1, kind="stable")[:, :L]
    return np.take_along_axis(flat, order, 1), np.take_along_axis(offs, order[..., None], 1)


# -- backward --

def replay(tape: SearchTape, Q, K) -> np.ndarray:
    """Recompute the selected scores from the saved bilinear terms."""
    Q, K = _prepare(Q, K)
    cfg = tape.cfg
    _, H, W, F = Q.shape
    ts, hs, wws = tape.coords.T
    acc = np.zeros(tape.key_y.shape, dtype=np.result_type(Q.dtype, K.dtype))
    for j, (ph, pw) in enumerate(patch_offsets(cfg.ps)):
        qv = Q[ts, reflect_index(hs + ph, H), reflect_index(wws + pw, W)][:, None, :]
        iy0, iy1, ix0, ix1 = np.moveaxis(tape.corners[:, :, j], -1, 0)
        ay, ax = (w.astype(acc.dtype)[..., None] for w in np.moveaxis(tape.weights[:, :, j], -1, 0))
        kt = tape.key_t
        kv = ((1 - ay) * (1 - ax) * K[kt, iy0, ix0] + (1 - ay) * ax * K[kt, iy0, ix1]
              + ay * (1 - ax) * K[kt, iy1, ix0] + ay * ax * K[kt, iy1, ix1])
        prod = qv * kv if cfg.metric == "ip" else (qv - kv) ** 2
        for c in range(F):
            acc += prod[..., c]
    return acc if cfg.metric == "ip" else -acc


def _backward_part(grad, tape, Q, K, sel):
    cfg = tape.cfg
    T, H, W, F = Q.shape
    ts, hs, wws = tape.coords[sel].T
    g = grad[sel]
    kt = tape.key_t[sel]
    ky = tape.key_y[sel]
    kx = tape.key_x[sel]
    plane = tape.plane[sel]
    nplanes = tape.cfg.nframes if tape.mode == "shifted" else 1
    q_idx, q_val, k_idx, k_val = [], [], [], []
    gy = np.zeros(ky.shape)
    gx = np.zeros(kx.shape)
    ch = np.arange(F)
    for ph, pw in patch_offsets(cfg.ps):
        qy = reflect_index(hs + ph, H)
        qx = reflect_index(wws + pw, W)
        qv = Q[ts, qy, qx][:, None, :]
        kv = gather_bilinear(K, kt, ky + ph, kx + pw)
        if cfg.metric == "ip":
            gq = g[..., None] * kv
            gk = g[..., None] * qv
        else:
            d = qv - kv
            gq = -2 * g[..., None] * d
            gk = 2 * g[..., None] * d
        q_idx.append((((ts * H + qy) * W + qx) * F)[:, None] + ch)
        q_val.append(gq.sum(1))
        ki, kvv = bilinear_scatter_terms(K.shape, kt, ky + ph, kx + pw, gk)
        k_idx.append(ki)
        k_val.append(kvv)
        a, b = bilinear_coord_grad(K, kt, ky + ph, kx + pw, gk)
        gy += a
        gx += b
    dQ = accumulate(Q.size, np.concatenate([i.ravel() for i in q_idx]),
                    np.concatenate([v.ravel() for v in q_val]))
    dK = accumulate(K.size, np.concatenate(k_idx), np.concatenate(k_val))
    base = (((ts[:, None] * nplanes + plane) * H + hs[:, None]) * W + wws[:, None]) * 2
    s_idx = np.concatenate([base.ravel(), (base + 1).ravel()])
    s_val = np.concatenate([gy.ravel(), gx.ravel()])
    dS = accumulate(T * nplanes * H * W * 2, s_idx, s_val)
    return dQ, dK, dS


def shifted_nls_backward(grad_selected, tape: SearchTape, Q, K, *,
                         deterministic: bool = True, threads: int = 1):
    """Vector-Jacobian product of the selected scores.

    Returns ``(dQ, dK, dflow)``. ``dflow`` is ``(dfflow, dbflow)`` for the
    shifted search and the single flow gradient for :func:`paired_search`;
    entries for flows passed as ``None`` are ``None``. Gradients reach only
    the selected entries. In deterministic mode every scatter runs in one
    fixed order; otherwise per-thread partials are summed as they finish.
    """
    Q, K = _prepare(Q, K)
    if tuple(Q.shape) != tape.shape:
        raise DomainError(f"tape was recorded for shape {tape.shape}, got {Q.shape}")
    grad = np.asarray(grad_selected, dtype=np.float64)
    if grad.shape != tape.values.shape:
        raise DomainError(f"grad shape {grad.shape} != selected shape {tape.values.shape}")
    nq = grad.shape[0]
    if deterministic or threads <= 1:
        dQ, dK, dS = _backward_part(grad, tape, Q, K, slice(None))
    else:
        parts = np.array_split(np.arange(nq), threads)
        dQ = dK = dS = 0
        with ThreadPoolExecutor(max_workers=threads) as ex:
            futs = [ex.submit(_backward_part, grad, tape, Q, K, p) for p in parts]
            for f in as_completed(futs):
                a, b, c = f.result()
                dQ, dK, dS = dQ + a, dK + b, dS + c
    T, H, W, _ = Q.shape
    dQ = dQ.reshape(Q.shape)
    dK = dK.reshape(K.shape)
    if tape.mode == "paired":
        return dQ, dK, dS.reshape(T, H, W, 2)
    nplanes = tape.cfg.nframes
    dS = dS.reshape(T, nplanes, H, W, 2)
    fflow, bflow = tape.flows
    dF = None if fflow is None else np.zeros((T, H, W, 2))
    dB = None if bflow is None else np.zeros((T, H, W, 2))
    for t in range(T):
        for k, dt in enumerate(temporal_order(tape.cfg.wt)):
            if dt == 0 or not 0 <= t + dt < T or not dS[t, k].any():
                continue
            chain = _flow_chain(t, dt, fflow, bflow)
            if not chain:
                continue
            grads = compose_flow_backward(chain, dS[t, k])
            target, step = (dF, 1) if dt > 0 else (dB, -1)
            for j, gj in enumerate(grads):
                target[t + step * j] += gj
    return dQ, dK, (dF, dB)
