"""Real spherical harmonics in the splatting convention, and their rotation.

Coefficients are band-major (l = 0..3, m = -l..l inside a band), the same
order the splat PLY ``f_dc``/``f_rest`` fields use. The basis matches the
rasterizer constants, i.e. the real harmonics carry the Condon-Shortley sign
``(-1)^m``.

Rotation blocks come from the Ivanic-Ruedenberg recurrence, computed in the
sign-free real basis and then conjugated by ``diag((-1)^m)``. The contract is

    eval_sh(rotate_sh(sh, D(R)), d) == eval_sh(sh, R.T @ d)

which pins every block uniquely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import MAX_SH_DEGREE, SH_C0, Gaussian, SplatError, matrix_to_quat, quat_multiply, sh_coeff_count

SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def _check_degree(degree: int) -> None:
    if degree not in range(MAX_SH_DEGREE + 1):
        raise SplatError(f"SH degree must be in 0..{MAX_SH_DEGREE}, got {degree}")


def _check_unit(directions: np.ndarray, tol: float = 1e-9) -> None:
    n = np.linalg.norm(directions, axis=-1)
    if not np.all(np.abs(n - 1.0) <= tol):
        raise SplatError("direction must be a unit vector")


def eval_real_sh_basis(degree: int, direction) -> np.ndarray:
    """Basis values Y_lm(direction), shape ``(..., (degree+1)**2)``."""
    _check_degree(degree)
    d = np.asarray(direction, dtype=np.float64)
    _check_unit(d)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (sh_coeff_count(degree),))
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[..., 4] = SH_C2[0] * xy
        out[..., 5] = SH_C2[1] * yz
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * xz
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3 * xx - yy)
        out[..., 10] = SH_C3[1] * xy * z
        out[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def eval_sh(sh, direction) -> np.ndarray:
    """Unclamped SH expansion ``<sh, Y(direction)>`` along the last axis."""
    sh = np.asarray(sh, dtype=np.float64)
    degree = int(round(np.sqrt(sh.shape[-1]))) - 1
    y = eval_real_sh_basis(degree, direction)
    return np.sum(sh * y, axis=-1)


def eval_sh_color(g: Gaussian, view_direction) -> np.ndarray:
    """RGB seen along ``view_direction``: clamp(0.5 + <sh_c, Y(d)>, 0, 1) per channel."""
    d = np.asarray(view_direction, dtype=np.float64)
    _check_unit(d)
    return np.clip(0.5 + eval_sh(np.asarray(g.sh).reshape(3, -1), d), 0.0, 1.0)


# -- Ivanic-Ruedenberg recurrence ------------------------------------------


def _c(mat: list, i: int, j: int) -> float:
    off = (len(mat) - 1) // 2
    return mat[i + off][j + off]


def _p(i, a, b, l, r1, prev):
    if b == l:
        return _c(r1, i, 1) * _c(prev, a, l - 1) - _c(r1, i, -1) * _c(prev, a, -l + 1)
    if b == -l:
        return _c(r1, i, 1) * _c(prev, a, -l + 1) + _c(r1, i, -1) * _c(prev, a, l - 1)
    return _c(r1, i, 0) * _c(prev, a, b)


def _band(l: int, r1: np.ndarray, prev: np.ndarray) -> np.ndarray:
    # nested lists: scalar indexing into ndarrays dominates the runtime otherwise
    r1, prev = r1.tolist(), prev.tolist()
    out = np.empty((2 * l + 1, 2 * l + 1))
    for m in range(-l, l + 1):
        am = abs(m)
        d0 = 1.0 if m == 0 else 0.0
        for n in range(-l, l + 1):
            denom = 2.0 * l * (2.0 * l - 1.0) if abs(n) == l else float((l + n) * (l - n))
            u = math.sqrt((l + m) * (l - m) / denom)
            v = 0.5 * math.sqrt((1.0 + d0) * (l + am - 1.0) * (l + am) / denom) * (1.0 - 2.0 * d0)
            w = -0.5 * math.sqrt(max(l - am - 1.0, 0.0) * (l - am) / denom) * (1.0 - d0)
            val = 0.0
            if u != 0.0:
                val += u * _p(0, m, n, l, r1, prev)
            if v != 0.0:
                if m == 0:
                    vv = _p(1, 1, n, l, r1, prev) + _p(-1, -1, n, l, r1, prev)
                elif m > 0:
                    k1 = 1.0 if m == 1 else 0.0
                    vv = _p(1, m - 1, n, l, r1, prev) * math.sqrt(1.0 + k1)
                    if m != 1:
                        vv -= _p(-1, -m + 1, n, l, r1, prev)
                else:
                    k1 = 1.0 if m == -1 else 0.0
                    vv = _p(-1, -m - 1, n, l, r1, prev) * math.sqrt(1.0 + k1)
                    if m != -1:
                        vv += _p(1, m + 1, n, l, r1, prev)
                val += v * vv
            if w != 0.0:
                if m > 0:
                    ww = _p(1, m + 1, n, l, r1, prev) + _p(-1, -m - 1, n, l, r1, prev)
                else:
                    ww = _p(1, m - 1, n, l, r1, prev) - _p(-1, -m + 1, n, l, r1, prev)
                val += w * ww
            out[m + l, n + l] = val
    return out


@dataclass(frozen=True)
class ShRotation:
    """Per-band real rotation blocks; ``blocks[l]`` is (2l+1)x(2l+1)."""

    blocks: tuple

    @property
    def degree(self) -> int:
        return len(self.blocks) - 1

    def matrix(self) -> np.ndarray:
        k = sh_coeff_count(self.degree)
        out = np.zeros((k, k))
        for l, b in enumerate(self.blocks):
            s = l * l
            out[s:s + 2 * l + 1, s:s + 2 * l + 1] = b
        return out


def _check_rotation(rotation: np.ndarray) -> np.ndarray:
    r = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
        raise SplatError("not an orthonormal matrix")
    if np.linalg.det(r) < 0:
        raise SplatError("improper rotation (det < 0)")
    return r


def sh_rotation_from(rotation, degree: int = MAX_SH_DEGREE) -> ShRotation:
    """Rotation operator on SH coefficient vectors for the spatial rotation ``rotation``."""
    _check_degree(degree)
    r = _check_rotation(rotation)
    blocks = [np.ones((1, 1))]
    if degree == 0:
        return ShRotation(tuple(blocks))
    order = [1, 2, 0]  # m = -1, 0, 1 <-> y, z, x
    r1 = r[np.ix_(order, order)]
    plain = [blocks[0], r1]
    for l in range(2, degree + 1):
        plain.append(_band(l, r1, plain[-1]))
    for l in range(1, degree + 1):
        s = (-1.0) ** np.arange(-l, l + 1)
        blocks.append(plain[l] * s[:, None] * s[None, :])
    return ShRotation(tuple(blocks))


def rotate_sh(sh, rot: ShRotation) -> np.ndarray:
    """Apply ``rot`` to coefficient vectors along the last axis (any leading shape)."""
    sh = np.asarray(sh, dtype=np.float64)
    if sh.shape[-1] != sh_coeff_count(rot.degree):
        raise SplatError(
            f"SH length {sh.shape[-1]} does not match rotation degree {rot.degree}"
        )
    return sh @ rot.matrix().T


def rotate_quaternion(q, rotation) -> np.ndarray:
    """World-frame rotation of Gaussian orientations: ``quat(rotation) ⊗ q``, normalized."""
    r = _check_rotation(rotation)
    out = quat_multiply(matrix_to_quat(r), np.asarray(q, dtype=np.float64))
    return out / np.linalg.norm(out, axis=-1, keepdims=True)
