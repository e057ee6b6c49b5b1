"""Domain types: Gaussians, Gaussian maps, point clouds, rigid transforms.

Maps are stored struct-of-arrays (one array per attribute) because real maps
hold millions of splats. Scale and opacity are kept in the on-disk
pre-activation convention (log scale, logit opacity); the ``*_activated``
accessors give the linear values. Quaternions are (w, x, y, z).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SH_C0 = 0.28209479177387814
MAX_SH_DEGREE = 3


class SplatError(Exception):
    """Base class for all errors raised by splatdiff."""


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Unit-normalize quaternions along the last axis.

    Zero-norm rows come back as NaN so validation can flag them instead of
    silently inventing an orientation.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return q / n


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = normalize_quaternions(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion with w >= 0 (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b, broadcasting over leading axes."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion p -> R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise SplatError("rigid transform has non-finite entries")
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise SplatError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        if m.size != 16:
            raise SplatError(f"expected 16 matrix entries, got {m.size}")
        m = m.reshape(4, 4)
        if np.max(np.abs(m[3] - [0, 0, 0, 1])) > 1e-9:
            raise SplatError("bottom row of an SE(3) matrix must be (0, 0, 0, 1)")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        """Axis-angle (radians) constructor via Rodrigues' formula."""
        v = np.asarray(rotvec, dtype=np.float64)
        theta = np.linalg.norm(v)
        if theta < 1e-300:
            return cls(np.eye(3), translation)
        k = v / theta
        kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        r = np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)
        # re-orthonormalize so the 1e-9 invariant holds even for awkward angles
        u, _, vt = np.linalg.svd(r)
        return cls(u @ vt, translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    __matmul__ = compose

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def to_list(self) -> list[float]:
        return [float(v) for v in self.matrix().ravel()]


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64)
        if p.size == 0:
            p = p.reshape(0, 3)
        if p.ndim != 2 or p.shape[1] != 3:
            raise SplatError(f"point cloud must be (N, 3), got {p.shape}")
        if not np.all(np.isfinite(p)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(p), axis=1))[0])
            raise SplatError(f"non-finite point at row {bad}")
        object.__setattr__(self, "points", _frozen(p))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Gaussian:
    """One splat, in stored (pre-activation) convention."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    sh: np.ndarray
    opacity: float

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[-1]))) - 1

    @property
    def scale_activated(self) -> np.ndarray:
        return np.exp(self.scale)

    @property
    def opacity_activated(self) -> float:
        return float(sigmoid(self.opacity))


@dataclass(frozen=True)
class GaussianMap:
    """Index-addressable collection of Gaussians sharing one SH degree.

    ``origin`` records provenance: for carried Gaussians the index they had
    in the map they came from, -1 for Gaussians inserted from LiDAR points.
    """

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    sh: np.ndarray
    opacities: np.ndarray
    sh_degree: int = MAX_SH_DEGREE
    frame_label: str = ""
    origin: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.sh_degree not in range(MAX_SH_DEGREE + 1):
            raise SplatError(f"sh_degree must be in 0..{MAX_SH_DEGREE}, got {self.sh_degree}")
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(pos)
        k = sh_coeff_count(self.sh_degree)
        sh = np.asarray(self.sh, dtype=np.float64)
        if sh.shape != (n, 3, k):
            raise SplatError(f"sh array must be ({n}, 3, {k}) for degree {self.sh_degree}, got {sh.shape}")
        arrays = {
            "positions": pos,
            "scales": np.asarray(self.scales, dtype=np.float64).reshape(n, 3),
            "rotations": np.asarray(self.rotations, dtype=np.float64).reshape(n, 4),
            "sh": sh,
            "opacities": np.asarray(self.opacities, dtype=np.float64).reshape(n),
        }
        for name, a in arrays.items():
            object.__setattr__(self, name, _frozen(a))
        origin = self.origin
        if origin is None:
            origin = np.arange(n, dtype=np.int64)
        origin = np.asarray(origin, dtype=np.int64).reshape(n)
        object.__setattr__(self, "origin", _frozen(origin))

    @classmethod
    def empty(cls, sh_degree: int = MAX_SH_DEGREE, frame_label: str = "") -> GaussianMap:
        k = sh_coeff_count(sh_degree)
        return cls(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3, k)), np.zeros(0),
            sh_degree=sh_degree, frame_label=frame_label,
        )

    @classmethod
    def from_gaussians(
        cls, gaussians: Sequence[Gaussian], sh_degree: int | None = None, frame_label: str = ""
    ) -> GaussianMap:
        if not gaussians:
            return cls.empty(MAX_SH_DEGREE if sh_degree is None else sh_degree, frame_label)
        if sh_degree is None:
            sh_degree = gaussians[0].sh_degree
        degrees = {g.sh_degree for g in gaussians}
        if degrees != {sh_degree}:
            raise SplatError(f"mixed SH degrees {sorted(degrees)} in one map")
        return cls(
            np.stack([g.position for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.stack([np.asarray(g.sh).reshape(3, -1) for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
            sh_degree=sh_degree,
            frame_label=frame_label,
        )

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i], self.scales[i], self.rotations[i], self.sh[i], float(self.opacities[i]))

    def __iter__(self) -> Iterable[Gaussian]:
        return (self[i] for i in range(len(self)))

    @property
    def scales_activated(self) -> np.ndarray:
        return np.exp(self.scales)

    @property
    def opacities_activated(self) -> np.ndarray:
        return sigmoid(self.opacities)

    @property
    def rotations_normalized(self) -> np.ndarray:
        return normalize_quaternions(self.rotations)

    def point_cloud(self) -> PointCloud:
        return PointCloud(self.positions)

    def replace(self, **changes) -> GaussianMap:
        fields = dict(
            positions=self.positions, scales=self.scales, rotations=self.rotations, sh=self.sh,
            opacities=self.opacities, sh_degree=self.sh_degree, frame_label=self.frame_label,
            origin=self.origin,
        )
        fields.update(changes)
        return GaussianMap(**fields)

    def subset(self, index) -> GaussianMap:
        """Gaussians at ``index`` (int array or bool mask), provenance carried along."""
        return self.replace(
            positions=self.positions[index], scales=self.scales[index], rotations=self.rotations[index],
            sh=self.sh[index], opacities=self.opacities[index], origin=self.origin[index],
        )

    def values_equal(self, other: GaussianMap) -> bool:
        return (
            self.sh_degree == other.sh_degree
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("positions", "scales", "rotations", "sh", "opacities")
            )
        )


@dataclass(frozen=True)
class Violation:
    index: int | None
    invariant: str
    detail: str = ""

    def __str__(self) -> str:
        where = "map" if self.index is None else f"gaussian {self.index}"
        return f"{where}: {self.invariant}" + (f" ({self.detail})" if self.detail else "")


def validate_map(gmap: GaussianMap) -> list[Violation]:
    """Check every Gaussian/map invariant; never raises."""
    out: list[Violation] = []
    n = len(gmap)
    if gmap.sh.shape[1:] != (3, sh_coeff_count(gmap.sh_degree)):
        out.append(Violation(None, "sh coefficient count", f"shape {gmap.sh.shape}"))
    pos_ok = np.all(np.isfinite(gmap.positions), axis=1)
    for i in np.flatnonzero(~pos_ok):
        out.append(Violation(int(i), "finite position"))
    qn = np.linalg.norm(gmap.rotations, axis=1)
    q_bad = ~np.isfinite(qn) | (qn == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        renorm = np.linalg.norm(gmap.rotations / qn[:, None], axis=1)
    q_bad |= ~(np.abs(renorm - 1.0) <= 1e-6)
    for i in np.flatnonzero(q_bad):
        out.append(Violation(int(i), "normalizable quaternion", f"norm {qn[i]!r}"))
    attr_ok = (
        np.all(np.isfinite(gmap.scales), axis=1)
        & np.all(np.isfinite(gmap.sh.reshape(n, -1)), axis=1)
        & np.isfinite(gmap.opacities)
    )
    for i in np.flatnonzero(~attr_ok):
        out.append(Violation(int(i), "finite attributes"))
    out.sort(key=lambda v: (-1 if v.index is None else v.index))
    return out


@dataclass(frozen=True)
class ChangeReport:
    """Emerging (submap) and disappearing (map) indices with their statistics."""

    ep_indices: np.ndarray
    dp_indices: np.ndarray
    ep_mean_dist: np.ndarray
    dp_mean_dist: np.ndarray
    params: dict

    def __post_init__(self):
        for name in ("ep_indices", "dp_indices"):
            a = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            object.__setattr__(self, name, _frozen(a))
        for name in ("ep_mean_dist", "dp_mean_dist"):
            a = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            object.__setattr__(self, name, _frozen(a))
        n, m = len(self.ep_mean_dist), len(self.dp_mean_dist)
        for name, a, bound in (("ep", self.ep_indices, n), ("dp", self.dp_indices, m)):
            if len(a) and (a.min() < 0 or a.max() >= bound):
                raise SplatError(f"{name} index out of range [0, {bound})")
            if len(np.unique(a)) != len(a):
                raise SplatError(f"duplicate {name} indices")

    def to_dict(self) -> dict:
        return {
            "ep": self.ep_indices.tolist(),
            "dp": self.dp_indices.tolist(),
            "ep_dist": self.ep_mean_dist.tolist(),
            "dp_dist": self.dp_mean_dist.tolist(),
            "params": dict(self.params),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ChangeReport:
        return cls(d["ep"], d["dp"], d["ep_dist"], d["dp_dist"], dict(d.get("params", {})))
