"""Experiment harness: frame alignment, correction statistics, cost models, benchmarks."""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .aggregate import softmax_rows, wpsum
from .errors import ConfigError, DomainError
from .flow import estimate_flow_block_matching
from .memory import MemoryMeter
from .search import SearchConfig, num_queries, paired_search, query_grid, shifted_nls_forward
from .tensor_core import add_gaussian_noise, as_video, psnr


# -- fixtures --

def smooth_texture(H: int, W: int, F: int = 1, seed: int = 0, blur: int = 1) -> np.ndarray:
    """Random texture on the 0-255 scale, box-blurred ``blur`` times (3x3, reflected)."""
    rng = np.random.default_rng(seed)
    img = rng.random((H, W, F))
    for _ in range(blur):
        p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="reflect")
        img = sum(p[i:i + H, j:j + W] for i in range(3) for j in range(3)) / 9.0
    lo, hi = img.min(), img.max()
    return 255.0 * (img - lo) / (hi - lo)


def translating_video(T: int, H: int, W: int, F: int = 1, velocity=(0, 0), seed: int = 0,
                      blur: int = 1, circular: bool = False):
    """Frames of a texture moving by integer ``velocity = (dy, dx)`` per frame.

    Returns ``(video, fflow)``; ``fflow[t]`` is the exact displacement from
    frame ``t`` to ``t + 1`` (constant ``velocity``). With ``circular`` the
    frames are rolled copies of one texture; otherwise they are crops of a
    larger canvas, so no content wraps around.
    """
    vy, vx = (int(v) for v in velocity)
    if circular:
        base = smooth_texture(H, W, F, seed, blur)
        video = np.stack([np.roll(base, (t * vy, t * vx), axis=(0, 1)) for t in range(T)])
    else:
        my, mx = abs(vy) * (T - 1), abs(vx) * (T - 1)
        canvas = smooth_texture(H + my, W + mx, F, seed, blur)
        y0 = my if vy > 0 else 0
        x0 = mx if vx > 0 else 0
        video = np.stack([canvas[y0 - t * vy:y0 - t * vy + H, x0 - t * vx:x0 - t * vx + W]
                          for t in range(T)])
    fflow = np.broadcast_to(np.array([vy, vx], dtype=np.float64), (T, H, W, 2)).copy()
    return video, fflow


# -- alignment --

@dataclass
class AlignmentReport:
    psnr: list
    mean_psnr: float
    config: dict
    flow_source: str
    stage_ms: dict
    total_ms: float
    peak_aux_bytes: int

    def records(self) -> list[dict]:
        """Line records: one per aligned frame, then a summary."""
        out = [{"record": "frame", "t": t, "psnr": _fmt_db(p)} for t, p in enumerate(self.psnr)]
        out.append({"record": "summary", "mean_psnr": _fmt_db(self.mean_psnr),
                    "flow_source": self.flow_source, "config": self.config,
                    "stage_ms": self.stage_ms, "total_ms": self.total_ms,
                    "peak_aux_bytes": self.peak_aux_bytes})
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())


def _fmt_db(v):
    return "inf" if math.isinf(v) else v


def align_frames(video, cfg: SearchConfig, flow="zero", noise_sigma: float = 15.0, seed: int = 0,
                 *, peak: float = 255.0, bm_block: int = 5, bm_radius: int = 4,
                 threads: int = 1, fused: bool = False):
    """Align each frame ``t + 1`` onto frame ``t`` with a top-1 search and patch sum.

    ``flow`` is ``"zero"`` (plain non-local search), ``"bm"`` (block matching
    on the noisy frames) or an array of forward flows ``(T-1 or T, H, W, 2)``.
    Search runs on noisy frames; the aggregate reads the clean frame
    ``t + 1`` and is scored against the clean frame ``t``.
    Returns ``(aligned, report)`` with ``aligned`` of shape ``(T-1, H, W, F)``.
    """
    clean = as_video(video)
    T, H, W, F = clean.shape
    if T < 2:
        raise DomainError("alignment needs at least two frames")
    if cfg.topl != 1:
        cfg = cfg.replace(topl=1)
    if not cfg.covers_all_pixels:
        raise ConfigError(f"stride0={cfg.stride0} leaves holes with ps={cfg.ps}")
    meter = MemoryMeter()
    marks = [time.perf_counter()]

    noisy = add_gaussian_noise(clean, noise_sigma, seed)
    marks.append(time.perf_counter())

    if isinstance(flow, str):
        if flow == "zero":
            source, fl = "zero", np.zeros((T - 1, H, W, 2))
        elif flow in ("bm", "block-matching"):
            source = "block-matching"
            fl = np.stack([estimate_flow_block_matching(noisy[t], noisy[t + 1], bm_block, bm_radius)
                           for t in range(T - 1)])
        else:
            raise ConfigError(f"unknown flow source {flow!r}")
    else:
        source = "file"
        fl = np.asarray(flow, dtype=np.float64)
        if fl.shape[1:] != (H, W, 2) or fl.shape[0] not in (T - 1, T):
            raise DomainError(f"flow shape {fl.shape} does not match video {clean.shape}")
        fl = fl[:T - 1]
    marks.append(time.perf_counter())

    vals, offs, _ = paired_search(noisy[:-1], noisy[1:], fl, cfg, fused=fused,
                                  threads=threads, meter=meter)
    marks.append(time.perf_counter())

    weights = softmax_rows(vals, cfg.softmax_scale)
    aligned = wpsum(clean[1:], weights, offs, cfg)
    marks.append(time.perf_counter())

    scores = [psnr(aligned[t], clean[t], peak) for t in range(T - 1)]
    mean = math.inf if all(math.isinf(s) for s in scores) else float(np.mean(scores))
    marks.append(time.perf_counter())

    names = ("noise", "flow", "search", "aggregate", "metric")
    stage_ms = {n: 1e3 * (marks[i + 1] - marks[i]) for i, n in enumerate(names)}
    report = AlignmentReport(psnr=scores, mean_psnr=mean,
                             config=dict(asdict(cfg), noise_sigma=noise_sigma, seed=seed),
                             flow_source=source, stage_ms=stage_ms,
                             total_ms=1e3 * (marks[-1] - marks[0]), peak_aux_bytes=meter.peak)
    return aligned, report


# -- correction statistics --

@dataclass
class CorrectionStats:
    support: np.ndarray        # (n, 2) distinct corrections (dh, dw)
    mass: np.ndarray           # (n,) fraction of matches at each support point
    fraction_at_zero: float
    covariance: np.ndarray     # (2, 2) population covariance
    mean: np.ndarray
    radius_quantiles: dict = field(default_factory=dict)
    count: int = 0


def correction_stats(flow_in, offsets, stride0: int = 1, *, dts=None, decimals: int = 6):
    """Distribution of top-1 offsets minus the window-center shift.

    ``flow_in`` is ``(T, H, W, 2)`` holding the shift that centered each
    query's window (it is read on the ``stride0`` query grid) or already
    per-query ``(nQ, 2)``. Rows whose ``dt`` is not in ``dts`` are skipped
    (``None`` keeps all). Corrections are rounded to ``decimals`` before
    binning.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.ndim == 3:
        offsets = offsets[:, 0]
    flow_in = np.asarray(flow_in, dtype=np.float64)
    if flow_in.ndim == 4:
        T, H, W, _ = flow_in.shape
        ts, hs, ws = query_grid(T, H, W, stride0)
        centers = flow_in[ts, hs, ws]
    else:
        centers = flow_in
    if centers.shape != (offsets.shape[0], 2):
        raise DomainError(f"{centers.shape[0]} shifts for {offsets.shape[0]} queries")
    keep = np.ones(len(offsets), bool) if dts is None else np.isin(offsets[:, 0], dts)
    corr = np.round(offsets[keep, 1:] - centers[keep], decimals) + 0.0
    if corr.shape[0] == 0:
        raise DomainError("no matches selected")
    support, counts = np.unique(corr, axis=0, return_counts=True)
    mass = counts / counts.sum()
    zero = np.all(support == 0, axis=1)
    rad = np.hypot(corr[:, 0], corr[:, 1])
    return CorrectionStats(support=support, mass=mass,
                           fraction_at_zero=float(mass[zero].sum()),
                           covariance=np.cov(corr.T, bias=True).reshape(2, 2),
                           mean=corr.mean(0),
                           radius_quantiles={q: float(np.quantile(rad, q)) for q in (0.68, 0.90)},
                           count=int(corr.shape[0]))


# -- cost models --

def global_reads_model(q_tile: int, ws: int) -> tuple[int, int]:
    """Global reads for a ``q_tile`` tile with overlapping vs non-overlapping windows."""
    return q_tile + ws - 1, q_tile * ws * ws


def n3net_memory_factor(P: int, sq: float, sk: float) -> float:
    """Memory growth of an unfolded patch database relative to the videos."""
    return P * P * (1.0 / (sq * sq) + 1.0 / (sk * sk))


# -- benchmarking --

BENCH_COLUMNS = ("ws", "wt", "ps", "stride0", "stride1", "topl", "metric", "fused",
                 "nq", "median_ms", "peak_aux_bytes", "error")


def run_benchmark(configs, shape, seed: int = 0, repeats: int = 3, *, threads: int = 1,
                  flow_scale: float = 2.0):
    """Time the shifted search for each config on a random video.

    ``configs`` items are :class:`SearchConfig` or ``(SearchConfig, fused)``.
    Each row holds the median wall time over ``repeats`` runs (after one
    warm-up) and the peak tracked auxiliary bytes of the last run.
    """
    if repeats < 3:
        raise ConfigError("repeats must be >= 3")
    T, H, W, F = shape
    rng = np.random.default_rng(seed)
    Q = rng.standard_normal((T, H, W, F))
    K = rng.standard_normal((T, H, W, F))
    fflow = flow_scale * rng.standard_normal((T, H, W, 2))
    bflow = flow_scale * rng.standard_normal((T, H, W, 2))
    rows = []
    for item in configs:
        cfg, fused = item if isinstance(item, tuple) else (item, False)
        row = {k: v for k, v in asdict(cfg).items() if k in BENCH_COLUMNS}
        row.update(fused=bool(fused), nq=num_queries(shape, cfg.stride0),
                   median_ms=None, peak_aux_bytes=None, error="")
        try:
            shifted_nls_forward(Q, K, fflow, bflow, cfg, fused=fused, threads=threads)
            times = []
            for _ in range(repeats):
                meter = MemoryMeter()
                t0 = time.perf_counter()
                shifted_nls_forward(Q, K, fflow, bflow, cfg, fused=fused, threads=threads,
                                    meter=meter)
                times.append(1e3 * (time.perf_counter() - t0))
            row.update(median_ms=statistics.median(times), peak_aux_bytes=meter.peak)
        except (MemoryError, ConfigError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def parse_grid(text: str):
    """Parse a benchmark grid: one config per line as ``key=value`` pairs.

    Keys are :class:`SearchConfig` fields plus ``fused``; ``#`` starts a comment.
    """
    out = []
    types = {"ws": int, "wt": int, "ps": int, "stride0": int, "stride1": float,
             "topl": int, "metric": str, "softmax_scale": float}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        kw, fused = {}, False
        for tok in line.split():
            key, sep, val = tok.partition("=")
            if not sep:
                raise ConfigError(f"line {n}: expected key=value, got {tok!r}")
            if key == "fused":
                fused = val.lower() in ("1", "true", "yes")
            elif key in types:
                try:
                    kw[key] = types[key](val)
                except ValueError:
                    raise ConfigError(f"line {n}: bad value for {key}: {val!r}") from None
            else:
                raise ConfigError(f"line {n}: unknown key {key!r}")
        if "ws" not in kw:
            raise ConfigError(f"line {n}: ws is required")
        out.append((SearchConfig(**kw), fused))
    return out


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: r.get(k, "") for k in BENCH_COLUMNS})
    return buf.getvalue()
