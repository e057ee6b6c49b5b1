"""Pearson-correlation depth loss and depth-map readers.

The loss is ``1 - corr(estimated, rendered)`` over pixels valid in both maps.
It is invariant to positive affine rescaling of either map, which is what
makes it usable with relative (non-metric) monocular depth.

Statistics are accumulated in float64 over fixed 4096-pixel blocks (two-pass
inside a block, pairwise-merged across blocks in a fixed order), so the value
does not depend on the thread count.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _accel
from ._accel import njit, prange
from .model import SplatError

BLOCK = 4096


class DegenerateDepthWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise SplatError(f"depth map must be 2-D, got shape {v.shape}")
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != v.shape:
                raise SplatError("mask shape differs from depth shape")
            object.__setattr__(self, "mask", m)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def valid(self) -> np.ndarray:
        return np.ones(self.values.shape, bool) if self.mask is None else self.mask


@dataclass(frozen=True)
class PearsonResult:
    loss: float
    n_valid: int
    degenerate: bool

    def to_dict(self) -> dict:
        return {"loss": self.loss, "n_valid": self.n_valid, "degenerate": self.degenerate}


@njit(parallel=True)
def _block_stats_nb(a, b, block):
    n = a.shape[0]
    nb = (n + block - 1) // block
    out = np.zeros((nb, 6))
    for i in prange(nb):
        lo = i * block
        hi = min(lo + block, n)
        sa = 0.0
        sb = 0.0
        for j in range(lo, hi):
            sa += a[j]
            sb += b[j]
        cnt = hi - lo
        ma = sa / cnt
        mb = sb / cnt
        m2a = 0.0
        m2b = 0.0
        c = 0.0
        for j in range(lo, hi):
            da = a[j] - ma
            db = b[j] - mb
            m2a += da * da
            m2b += db * db
            c += da * db
        out[i, 0] = cnt
        out[i, 1] = ma
        out[i, 2] = mb
        out[i, 3] = m2a
        out[i, 4] = m2b
        out[i, 5] = c
    return out


def _block_stats_np(a: np.ndarray, b: np.ndarray, block: int) -> np.ndarray:
    n = len(a)
    full = n // block
    parts = []
    for lo, hi, rows in ((0, full * block, full), (full * block, n, 1 if n % block else 0)):
        if rows == 0:
            continue
        xa = a[lo:hi].reshape(rows, -1)
        xb = b[lo:hi].reshape(rows, -1)
        ma = xa.mean(axis=1)
        mb = xb.mean(axis=1)
        da = xa - ma[:, None]
        db = xb - mb[:, None]
        parts.append(
            np.stack(
                [np.full(rows, xa.shape[1], float), ma, mb, (da * da).sum(1), (db * db).sum(1), (da * db).sum(1)],
                axis=1,
            )
        )
    return np.concatenate(parts, axis=0)


def _merge(stats: np.ndarray) -> tuple:
    # pairwise tree merge in a fixed order
    s = [tuple(row) for row in stats]
    while len(s) > 1:
        nxt = []
        for i in range(0, len(s) - 1, 2):
            n1, a1, b1, ma1, mb1, c1 = s[i]
            n2, a2, b2, ma2, mb2, c2 = s[i + 1]
            n = n1 + n2
            da = a2 - a1
            db = b2 - b1
            f = n1 * n2 / n
            nxt.append((n, a1 + da * n2 / n, b1 + db * n2 / n, ma1 + ma2 + da * da * f, mb1 + mb2 + db * db * f, c1 + c2 + da * db * f))
        if len(s) % 2:
            nxt.append(s[-1])
        s = nxt
    return s[0]


def correlation_stats(a: np.ndarray, b: np.ndarray) -> tuple:
    """(n, mean_a, mean_b, M2_a, M2_b, C_ab) of two equal-length float64 vectors."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if _accel.use_numba():
        stats = _block_stats_nb(a, b, BLOCK)
    else:
        stats = _block_stats_np(a, b, BLOCK)
    return _merge(stats)


def _degenerate(m2: float, n: float, mean: float) -> bool:
    return m2 / n <= (1e-12 * max(abs(mean), 1e-300)) ** 2


def pearson_stats(estimated: DepthMap, rendered: DepthMap) -> PearsonResult:
    if estimated.values.shape != rendered.values.shape:
        raise SplatError(f"depth map sizes differ: {estimated.values.shape} vs {rendered.values.shape}")
    valid = estimated.valid() & rendered.valid()
    a = estimated.values[valid].astype(np.float64)
    b = rendered.values[valid].astype(np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise SplatError("non-finite depth inside the valid mask")
    if len(a) < 2:
        raise SplatError(f"need at least 2 valid pixels, got {len(a)}")
    n, ma, mb, m2a, m2b, c = correlation_stats(a, b)
    if _degenerate(m2a, n, ma) or _degenerate(m2b, n, mb):
        return PearsonResult(1.0, int(n), True)
    corr = float(np.clip(c / np.sqrt(m2a * m2b), -1.0, 1.0))
    return PearsonResult(1.0 - corr, int(n), False)


def pearson_loss(estimated: DepthMap, rendered: DepthMap) -> float:
    """``1 - Pearson(estimated, rendered)`` in [0, 2]; 1.0 with a warning if either map is constant."""
    res = pearson_stats(estimated, rendered)
    if res.degenerate:
        warnings.warn("zero-variance depth map; correlation undefined, loss set to 1.0", DegenerateDepthWarning, stacklevel=2)
    return res.loss


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise SplatError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        while not dims:
            dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        ch = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * ch * 4), dtype=dtype)
    if data.size != w * h * ch:
        raise SplatError(f"{path}: truncated PFM data")
    img = data.reshape(h, w, ch)[::-1, :, 0]
    return np.ascontiguousarray(img.astype(np.float32))


def write_pfm(path, values: np.ndarray) -> None:
    v = np.asarray(values, dtype="<f4")
    h, w = v.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(v[::-1]).tobytes())


def read_depth(path, scale: float = 1.0) -> DepthMap:
    """PFM (float) or 16-bit PNG (integer * ``scale``); non-finite or zero PNG pixels are masked out."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        v = read_pfm(path).astype(np.float64) * scale
        return DepthMap(v, np.isfinite(v))
    if suffix == ".png":
        from PIL import Image

        with Image.open(path) as im:
            raw = np.array(im)
        if raw.ndim != 2:
            raise SplatError(f"{path}: expected a single-channel PNG")
        v = raw.astype(np.float64) * scale
        return DepthMap(v, raw != 0)
    if suffix == ".npy":
        v = np.load(path).astype(np.float64) * scale
        return DepthMap(v, np.isfinite(v))
    raise SplatError(f"{path}: unsupported depth format {suffix!r}")
