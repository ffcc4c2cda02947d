"""Video tensors, reflected patch access, bilinear sampling, noise and PSNR.

A video is a plain ``numpy.ndarray`` of shape ``(T, H, W, F)`` (frames,
rows, cols, channels; channels fastest). Spatial coordinates outside the
frame are mapped back with mirror reflection (``-1 -> 1``, ``H -> H-2``);
temporal indices must be in range.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, CoordinateError, DomainError, FormatError

RAW_MAGIC = b"STNT"
_RAW_HEADER = struct.Struct("<4sIIIIB")


def as_video(data, dtype=None, *, check_finite: bool = True) -> np.ndarray:
    """Validate ``data`` as a ``(T, H, W, F)`` real video and return it as an array."""
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise DomainError(f"video must have shape (T, H, W, F), got ndim={arr.ndim}")
    if min(arr.shape) < 1:
        raise DomainError(f"video dimensions must be >= 1, got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if check_finite and not np.all(np.isfinite(arr)):
        raise DomainError("video contains non-finite values")
    return arr


def reflect_index(idx, n: int):
    """Mirror integer indices into ``[0, n)`` without repeating the edge pixel."""
    idx = np.asarray(idx, dtype=np.int64)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m >= n, period - m, m)


def bilinear_corners(y, x, H: int, W: int):
    """Reflected corner indices and fractional parts for bilinear reads.

    Returns ``(iy0, iy1, ix0, ix1, ay, ax)``; the sample is
    ``(1-ay)(1-ax) v00 + (1-ay) ax v01 + ay (1-ax) v10 + ay ax v11``.
    """
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y0 = np.floor(y)
    x0 = np.floor(x)
    ay = y - y0
    ax = x - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    return (reflect_index(y0, H), reflect_index(y0 + 1, H),
            reflect_index(x0, W), reflect_index(x0 + 1, W), ay, ax)


def gather_bilinear(video: np.ndarray, t, y, x) -> np.ndarray:
    """Vectorized bilinear read of all channels at ``(t, y, x)`` arrays.

    ``t`` must already be valid frame indices. Output shape is
    ``broadcast(t, y, x).shape + (F,)``.
    """
    _, H, W, _ = video.shape
    iy0, iy1, ix0, ix1, ay, ax = bilinear_corners(y, x, H, W)
    dt = video.dtype
    ay = ay.astype(dt)[..., None]
    ax = ax.astype(dt)[..., None]
    by = 1 - ay
    bx = 1 - ax
    return (by * bx * video[t, iy0, ix0] + by * ax * video[t, iy0, ix1]
            + ay * bx * video[t, iy1, ix0] + ay * ax * video[t, iy1, ix1])


def _check_coord(video: np.ndarray, t, y, x):
    T = video.shape[0]
    if not (isinstance(t, (int, np.integer)) and 0 <= t < T):
        raise CoordinateError(f"frame index {t!r} outside [0, {T})")
    if not (math.isfinite(y) and math.isfinite(x)):
        raise CoordinateError(f"non-finite sample coordinate ({y}, {x})")


def bilinear_sample(video, t: int, y: float, x: float, c: int) -> float:
    video = as_video(video, check_finite=False)
    _check_coord(video, t, y, x)
    return float(gather_bilinear(video, t, y, x)[c])


def bilinear_weights(video, t: int, y: float, x: float):
    """The four ``((row, col), weight)`` terms behind :func:`bilinear_sample`."""
    video = as_video(video, check_finite=False)
    _check_coord(video, t, y, x)
    _, H, W, _ = video.shape
    iy0, iy1, ix0, ix1, ay, ax = (v.item() for v in bilinear_corners(y, x, H, W))
    return [((iy0, ix0), (1 - ay) * (1 - ax)), ((iy0, ix1), (1 - ay) * ax),
            ((iy1, ix0), ay * (1 - ax)), ((iy1, ix1), ay * ax)]


def check_patch_size(P: int) -> None:
    if int(P) != P or P < 1 or P % 2 == 0:
        raise ConfigError(f"patch size must be a positive odd integer, got {P}")


def patch_offsets(P: int):
    """Row-major ``(dy, dx)`` offsets of a ``P x P`` patch centered at 0."""
    r = P // 2
    return [(ph, pw) for ph in range(-r, r + 1) for pw in range(-r, r + 1)]


def extract_patch(video, t: int, y: int, x: int, P: int) -> np.ndarray:
    """Flattened ``F*P*P`` patch at ``(t, y, x)``, patch pixels row-major, channels fastest."""
    check_patch_size(P)
    video = as_video(video, check_finite=False)
    T, H, W, _ = video.shape
    if not 0 <= t < T:
        raise CoordinateError(f"frame index {t} outside [0, {T})")
    r = P // 2
    rows = reflect_index(np.arange(y - r, y + r + 1), H)
    cols = reflect_index(np.arange(x - r, x + r + 1), W)
    return video[t][np.ix_(rows, cols)].reshape(-1).copy()


def psnr(a, b, peak: float = 255.0) -> float:
    """PSNR in dB; ``math.inf`` when the inputs are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise DomainError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_noise(shape, seed: int) -> np.ndarray:
    """Standard normal samples from PCG64 uniforms via the Box-Muller transform.

    Uniform pairs ``(u1, u2)`` are drawn as consecutive ``random()`` values
    of ``numpy.random.PCG64(seed)`` (``u1`` replaced by ``1 - u1`` so the log
    is finite); the cosine and sine branches fill even and odd positions.
    """
    n = int(np.prod(shape))
    m = (n + 1) // 2
    rng = np.random.Generator(np.random.PCG64(seed))
    u = rng.random(2 * m)
    u1 = 1.0 - u[0::2]
    u2 = u[1::2]
    rad = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * m)
    z[0::2] = rad * np.cos(theta)
    z[1::2] = rad * np.sin(theta)
    return z[:n].reshape(shape)


def add_gaussian_noise(video, sigma: float, seed: int = 0) -> np.ndarray:
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    video = as_video(video)
    if sigma == 0:
        return video.copy()
    return (video + sigma * gaussian_noise(video.shape, seed)).astype(video.dtype)


# -- file I/O --

def save_raw(video, path) -> None:
    arr = as_video(video, check_finite=False)
    width = 4 if arr.dtype == np.float32 else 8
    T, H, W, F = arr.shape
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(RAW_MAGIC, T, H, W, F, width))
        fh.write(arr.astype("<f4" if width == 4 else "<f8").tobytes())


def load_raw(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    buf = path.read_bytes()
    if len(buf) < _RAW_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, T, H, W, F, width = _RAW_HEADER.unpack_from(buf)
    if magic != RAW_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if width not in (4, 8):
        raise FormatError(f"{path}: element width must be 4 or 8, got {width}")
    if min(T, H, W, F) < 1:
        raise FormatError(f"{path}: nonpositive dimension in {(T, H, W, F)}")
    count = T * H * W * F
    payload = len(buf) - _RAW_HEADER.size
    if payload != count * width:
        raise FormatError(f"{path}: payload has {payload} bytes, expected {count * width}")
    arr = np.frombuffer(buf, dtype="<f4" if width == 4 else "<f8", offset=_RAW_HEADER.size)
    arr = arr.astype(np.float32 if width == 4 else np.float64).reshape(T, H, W, F)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: non-finite values in payload")
    return arr


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode == "LA":
            img = img.convert("L")
        elif img.mode in ("P", "RGBA"):
            img = img.convert("RGB")
        if img.mode not in ("L", "RGB"):
            raise FormatError(f"{path}: unsupported PNG mode {img.mode}")
        arr = np.asarray(img, dtype=np.float64)
    return arr[..., None] if arr.ndim == 2 else arr


def load_video(path, dtype=np.float64) -> np.ndarray:
    """Load a raw ``.stnt`` tensor file or a directory of PNG frames."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise FileNotFoundError(f"{path}: no PNG frames")
        frames = []
        for f in files:
            fr = _read_png(f)
            if frames and fr.shape != frames[0].shape:
                raise FormatError(f"{f}: frame shape {fr.shape} differs from {frames[0].shape}")
            frames.append(fr)
        return np.stack(frames).astype(dtype)
    arr = load_raw(path)
    return arr if dtype is None else arr.astype(dtype, copy=False)


def save_video(video, path) -> None:
    """Write ``video`` as a raw tensor (``.stnt`` suffix) or as 8-bit PNG frames."""
    path = Path(path)
    if path.suffix == ".stnt":
        save_raw(video, path)
        return
    arr = as_video(video, check_finite=False)
    if arr.shape[-1] not in (1, 3):
        raise DomainError(f"PNG output needs 1 or 3 channels, got {arr.shape[-1]}")
    path.mkdir(parents=True, exist_ok=True)
    q = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    for t, frame in enumerate(q):
        img = Image.fromarray(frame[..., 0] if frame.shape[-1] == 1 else frame)
        img.save(path / f"{t:05d}.png")


# -- bilinear adjoints --

def bilinear_coord_grad(video: np.ndarray, t, y, x, g) -> tuple[np.ndarray, np.ndarray]:
    """Contract ``g`` (``(..., F)``) with d(sample)/dy and d(sample)/dx.

    At integer coordinates the right-sided derivative is used.
    """
    _, H, W, _ = video.shape
    iy0, iy1, ix0, ix1, ay, ax = bilinear_corners(y, x, H, W)
    v00 = video[t, iy0, ix0]
    v01 = video[t, iy0, ix1]
    v10 = video[t, iy1, ix0]
    v11 = video[t, iy1, ix1]
    ay = ay[..., None]
    ax = ax[..., None]
    dy = (1 - ax) * (v10 - v00) + ax * (v11 - v01)
    dx = (1 - ay) * (v01 - v00) + ay * (v11 - v10)
    return (g * dy).sum(-1), (g * dx).sum(-1)


def bilinear_scatter_terms(shape, t, y, x, g):
    """Flat indices and values that add ``g`` into ``shape`` through bilinear weights.

    Pass the result to :func:`accumulate` or ``np.bincount``; the transpose of
    :func:`gather_bilinear`.
    """
    T, H, W, F = shape
    iy0, iy1, ix0, ix1, ay, ax = bilinear_corners(y, x, H, W)
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), iy0.shape)
    ay = ay[..., None]
    ax = ax[..., None]
    ch = np.arange(F, dtype=np.int64)
    idx, val = [], []
    for iy, ix, w in ((iy0, ix0, (1 - ay) * (1 - ax)), (iy0, ix1, (1 - ay) * ax),
                      (iy1, ix0, ay * (1 - ax)), (iy1, ix1, ay * ax)):
        base = ((t * H + iy) * W + ix) * F
        idx.append((base[..., None] + ch).ravel())
        val.append((w * g).ravel())
    return np.concatenate(idx), np.concatenate(val)


def accumulate(size: int, idx: np.ndarray, val: np.ndarray) -> np.ndarray:
    """Sequential scatter-add; the summation order is the order of ``idx``."""
    return np.bincount(idx, weights=val, minlength=size)


def load_frame(path, dtype=np.float64) -> np.ndarray:
    """One ``(H, W, F)`` frame from a PNG file or the first frame of a raw tensor."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        if not path.is_file():
            raise FileNotFoundError(f"{path}: no such file")
        return _read_png(path).astype(dtype)
    return load_video(path, dtype)[0]
