"""Build the updated Gaussian-map prior from an old map and a current submap."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .detection import DetectionParams, detect_changes
from .model import (
    ChangeReport,
    GaussianMap,
    PointCloud,
    RigidTransform,
    SplatError,
    logit,
    normalize_quaternions,
    sigmoid,
)
from .registration import IcpParams, IcpResult, icp_align
from .sh import rotate_quaternion, rotate_sh, sh_rotation_from
from .spatial import KdIndex

log = logging.getLogger(__name__)


class NoDonorError(SplatError):
    pass


class PipelineError(SplatError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class Features(NamedTuple):
    """Non-positional Gaussian attributes in stored convention."""

    scale: np.ndarray
    rotation: np.ndarray
    sh: np.ndarray
    opacity: float


@dataclass(frozen=True)
class UpdateParams:
    e: int = 10
    fallback_features: Features | None = None

    def __post_init__(self):
        if self.e < 1:
            raise SplatError("e must be >= 1")


def transform_map(gmap: GaussianMap, transform: RigidTransform, frame_label: str | None = None) -> GaussianMap:
    """Re-express every Gaussian in the target frame.

    Positions move rigidly, orientations and SH coefficients rotate, scale and
    opacity are frame-independent and pass through.
    """
    label = gmap.frame_label if frame_label is None else frame_label
    r = transform.rotation
    if np.array_equal(r, np.eye(3)):
        return gmap.replace(positions=gmap.positions + transform.translation, frame_label=label)
    rot = sh_rotation_from(r, gmap.sh_degree)
    return gmap.replace(
        positions=transform.apply(gmap.positions),
        rotations=rotate_quaternion(gmap.rotations, r),
        sh=rotate_sh(gmap.sh, rot),
        frame_label=label,
    )


def remove_disappearing(gmap: GaussianMap, dp_indices) -> GaussianMap:
    dp = np.asarray(dp_indices, dtype=np.int64).reshape(-1)
    if len(dp) and (dp.min() < 0 or dp.max() >= len(gmap)):
        raise SplatError(f"disappearing index out of range for a map of {len(gmap)}")
    keep = np.ones(len(gmap), dtype=bool)
    keep[dp] = False
    return gmap.subset(keep)


def assign_features(ep_points, donors: GaussianMap, params: UpdateParams | None = None) -> GaussianMap:
    """Turn emerging LiDAR points into Gaussians carrying the mean features of their ``e`` nearest donors.

    Scale and opacity are averaged in activated (linear) space. Quaternions are
    sign-aligned to the nearest donor before the mean, then normalized.
    """
    params = params or UpdateParams()
    pts = ep_points.points if isinstance(ep_points, PointCloud) else np.asarray(ep_points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    k_coef = donors.sh.shape[-1]
    if n == 0:
        return GaussianMap.empty(donors.sh_degree, donors.frame_label)
    origin = np.full(n, -1, dtype=np.int64)
    if len(donors) == 0:
        fb = params.fallback_features
        if fb is None:
            raise NoDonorError("no donor Gaussians to copy features from and no fallback features given")
        return GaussianMap(
            pts,
            np.broadcast_to(np.asarray(fb.scale, dtype=np.float64), (n, 3)),
            np.broadcast_to(np.asarray(fb.rotation, dtype=np.float64), (n, 4)),
            np.broadcast_to(np.asarray(fb.sh, dtype=np.float64).reshape(3, k_coef), (n, 3, k_coef)),
            np.full(n, float(fb.opacity)),
            sh_degree=donors.sh_degree, frame_label=donors.frame_label, origin=origin,
        )

    idx, _ = KdIndex(donors.positions).query(pts, params.e)
    if idx.shape[1] == 1:
        # a mean over one donor is that donor; copy the stored values verbatim
        j = idx[:, 0]
        return GaussianMap(
            pts, donors.scales[j], donors.rotations[j], donors.sh[j], donors.opacities[j],
            sh_degree=donors.sh_degree, frame_label=donors.frame_label, origin=origin,
        )

    scales = np.log(np.exp(donors.scales[idx]).mean(axis=1))
    p = sigmoid(donors.opacities[idx]).mean(axis=1)
    opac = logit(np.clip(p, 1e-12, 1.0 - 1e-12))
    sh = donors.sh[idx].mean(axis=1)

    q = normalize_quaternions(donors.rotations[idx])
    sign = np.where(np.sum(q * q[:, :1, :], axis=-1) < 0, -1.0, 1.0)
    qm = (q * sign[..., None]).mean(axis=1)
    norm = np.linalg.norm(qm, axis=1, keepdims=True)
    degenerate = norm[:, 0] < 1e-12
    qm = np.where(degenerate[:, None], q[:, 0], qm / np.where(degenerate[:, None], 1.0, norm))

    return GaussianMap(
        pts, scales, qm, sh, opac,
        sh_degree=donors.sh_degree, frame_label=donors.frame_label, origin=origin,
    )


def merge_prior(kept: GaussianMap, emerging: GaussianMap) -> GaussianMap:
    """Carried Gaussians first, emerging ones appended; provenance preserved."""
    if len(emerging) and kept.sh_degree != emerging.sh_degree:
        raise SplatError(f"SH degree mismatch: kept {kept.sh_degree}, emerging {emerging.sh_degree}")
    if len(emerging) == 0:
        return kept
    return GaussianMap(
        np.concatenate([kept.positions, emerging.positions]),
        np.concatenate([kept.scales, emerging.scales]),
        np.concatenate([kept.rotations, emerging.rotations]),
        np.concatenate([kept.sh, emerging.sh]),
        np.concatenate([kept.opacities, emerging.opacities]),
        sh_degree=kept.sh_degree,
        frame_label=kept.frame_label,
        origin=np.concatenate([kept.origin, np.full(len(emerging), -1, dtype=np.int64)]),
    )


@dataclass
class UpdateResult:
    prior: GaussianMap
    report: ChangeReport
    icp: IcpResult
    timings: dict = field(default_factory=dict)

    @property
    def carried_fraction(self) -> float:
        m = len(self.report.dp_mean_dist)
        return 1.0 - len(self.report.dp_indices) / m if m else 0.0

    def provenance(self) -> dict:
        origin = self.prior.origin
        return {
            "carried": origin[origin >= 0].tolist(),
            "emerging": int(np.count_nonzero(origin < 0)),
            "transform": self.icp.transform.to_list(),
        }

    def provenance_json(self) -> str:
        return json.dumps(self.provenance())


class _Stage:
    def __init__(self, name: str, timings: dict):
        self.name = name
        self.timings = timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, exc) from exc
        return False


def update_pipeline(
    old_map: GaussianMap,
    submap: PointCloud,
    icp_params: IcpParams | None = None,
    det_params: DetectionParams | None = None,
    upd_params: UpdateParams | None = None,
    init: RigidTransform | None = None,
    frame_label: str = "submap",
) -> UpdateResult:
    """Register, detect, remove, insert, merge. Returns the prior plus diagnostics."""
    upd_params = upd_params or UpdateParams()
    timings: dict[str, float] = {}
    with _Stage("register", timings):
        if len(submap) == 0:
            raise SplatError("submap is empty")
        sub_index = KdIndex(submap.points)
        icp = icp_align(old_map.positions, submap.points, icp_params, init=init, target_index=sub_index)
    with _Stage("transform", timings):
        moved = transform_map(old_map, icp.transform, frame_label=frame_label)
    with _Stage("detect", timings):
        report = detect_changes(moved, submap, None, det_params, submap_index=sub_index)
    with _Stage("remove", timings):
        kept = remove_disappearing(moved, report.dp_indices)
    with _Stage("assign", timings):
        emerging = assign_features(submap.points[report.ep_indices], kept, upd_params)
    with _Stage("merge", timings):
        prior = merge_prior(kept, emerging)
    log.info(
        "update: %d map, %d submap -> %d dp, %d ep, prior %d",
        len(old_map), len(submap), len(report.dp_indices), len(report.ep_indices), len(prior),
    )
    return UpdateResult(prior, report, icp, timings)
