import math

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- independent scalar oracles (no package code) --

def ref_reflect(i, n):
    if n == 1:
        return 0
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


def ref_bilinear(frame, y, x, c):
    """Scalar bilinear read of ``frame[h, w, c]`` with mirrored borders."""
    H, W = frame.shape[:2]
    y0, x0 = math.floor(y), math.floor(x)
    ay, ax = y - y0, x - x0
    total = 0.0
    for dy, wy in ((0, 1 - ay), (1, ay)):
        for dx, wx in ((0, 1 - ax), (1, ax)):
            total += wy * wx * frame[ref_reflect(y0 + dy, H), ref_reflect(x0 + dx, W), c]
    return total


def ref_temporal_order(wt):
    out = [0]
    for k in range(1, wt + 1):
        out += [-k, k]
    return out


def ref_search(Q, K, cfg, fflow=None, bflow=None, pair_flow=None):
    """Brute-force window scan returning per query the sorted (value, slot, offset) list.

    Handles ``|dt| <= 1`` (raw flows) and the frame-paired mode.
    """
    T, H, W, F = Q.shape
    r = cfg.ws // 2
    pr = cfg.ps // 2
    order = [0] if pair_flow is not None else ref_temporal_order(cfg.wt)
    rows = []
    for t in range(T):
        for h in range(0, H, cfg.stride0):
            for w in range(0, W, cfg.stride0):
                cands = []
                slot = -1
                for dt in order:
                    for a in range(cfg.ws):
                        for b in range(cfg.ws):
                            slot += 1
                            if pair_flow is not None:
                                kt, sh = t, pair_flow[t, h, w]
                            else:
                                kt = t + dt
                                if not 0 <= kt < T:
                                    continue
                                if dt == 0:
                                    sh = (0.0, 0.0)
                                elif dt == 1:
                                    sh = fflow[t, h, w] if fflow is not None else (0.0, 0.0)
                                elif dt == -1:
                                    sh = bflow[t, h, w] if bflow is not None else (0.0, 0.0)
                                else:
                                    raise NotImplementedError
                            dh = sh[0] + cfg.stride1 * (a - r)
                            dw = sh[1] + cfg.stride1 * (b - r)
                            s = 0.0
                            for ph in range(-pr, pr + 1):
                                for pw in range(-pr, pr + 1):
                                    qh, qw = ref_reflect(h + ph, H), ref_reflect(w + pw, W)
                                    for c in range(F):
                                        q = Q[t, qh, qw, c]
                                        k = ref_bilinear(K[kt], h + dh + ph, w + dw + pw, c)
                                        s += q * k if cfg.metric == "ip" else -(q - k) ** 2
                            cands.append((s, slot, (0 if pair_flow is not None else dt, dh, dw)))
                cands.sort(key=lambda e: (-e[0], e[1]))
                rows.append(cands)
    return rows


def fd_gradient(f, x, index, h=1e-6):
    """Central difference of scalar ``f`` with respect to ``x[index]`` (restores ``x``)."""
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)


def max_rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


# -- acceptance summary --

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
