"""Rigid alignment of Gaussian-map positions to a LiDAR submap.

Point-to-point ICP: nearest-neighbour correspondences, a distance gate, and a
closed-form SVD solve per iteration. The tracked cost is the truncated RMSE
``sqrt(mean(min(dist², d_max²)))`` over every source point; with exact
nearest neighbours and an optimal inner solve this cannot increase from one
iteration to the next, gate or no gate.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import PointCloud, RigidTransform, SplatError
from .spatial import KdIndex

log = logging.getLogger(__name__)


class DegenerateGeometryError(SplatError):
    pass


class NoOverlapError(SplatError):
    def __init__(self, iteration: int):
        super().__init__(f"no correspondences within the gate at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class IcpParams:
    max_correspondence_distance: float = 2.0
    max_iterations: int = 100
    convergence_epsilon: float = 1e-7
    # cap on source points used for correspondences (seeded uniform subset); None = all
    max_source_points: int | None = 100_000
    seed: int = 0

    def __post_init__(self):
        if not (self.max_correspondence_distance > 0 and self.max_iterations > 0 and self.convergence_epsilon > 0):
            raise SplatError("ICP parameters must all be positive")
        if self.max_source_points is not None and self.max_source_points < 3:
            raise SplatError("max_source_points must be >= 3")


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    final_rmse: float
    iterations_used: int
    correspondence_count: int
    cost_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "matrix": self.transform.to_list(),
            "rmse": float(self.final_rmse),
            "iterations": int(self.iterations_used),
            "correspondences": int(self.correspondence_count),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def apply_transform(cloud_or_positions, transform: RigidTransform):
    """Map every point p to R p + t; returns the same kind of object it was given."""
    if isinstance(cloud_or_positions, PointCloud):
        return PointCloud(transform.apply(cloud_or_positions.points))
    return transform.apply(cloud_or_positions)


def estimate_rigid_transform(source_pts, target_pts) -> RigidTransform:
    """Least-squares proper rigid motion taking ``source_pts`` onto ``target_pts``."""
    src = _points(source_pts)
    dst = _points(target_pts)
    if len(src) != len(dst):
        raise SplatError(f"correspondence lengths differ: {len(src)} vs {len(dst)}")
    if len(src) < 3:
        raise SplatError(f"need at least 3 correspondences, got {len(src)}")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    a = src - cs
    b = dst - cd
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-12 * sv[0]:
        raise DegenerateGeometryError("source points are collinear or coincident")
    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, cd - r @ cs)


def _evaluate(index: KdIndex, moved: np.ndarray, gate2: float):
    idx, dist = index.query(moved, 1)
    d2 = dist[:, 0] ** 2
    inlier = d2 <= gate2
    cost = float(np.sqrt(np.minimum(d2, gate2).mean()))
    return cost, idx[:, 0], inlier, d2


def icp_align(
    source,
    target,
    params: IcpParams | None = None,
    init: RigidTransform | None = None,
    target_index: KdIndex | None = None,
) -> IcpResult:
    """Align ``source`` to ``target``; the result maps the source frame into the target frame.

    ``target_index`` lets callers reuse an index they already built over ``target``.
    """
    params = params or IcpParams()
    src = _points(source)
    tgt = _points(target)
    if len(src) < 3 or len(tgt) < 3:
        raise SplatError("ICP needs at least 3 points in both clouds")
    if params.max_source_points is not None and len(src) > params.max_source_points:
        rng = np.random.default_rng(params.seed)
        keep = np.sort(rng.choice(len(src), params.max_source_points, replace=False))
        src = src[keep]
    index = target_index if target_index is not None else KdIndex(tgt)
    gate2 = params.max_correspondence_distance ** 2
    transform = init or RigidTransform.identity()

    moved = transform.apply(src)
    cost, nn, inlier, d2 = _evaluate(index, moved, gate2)
    if not inlier.any():
        raise NoOverlapError(0)
    history = [cost]
    iterations = 0
    for it in range(1, params.max_iterations + 1):
        if cost == 0.0:
            break
        step = estimate_rigid_transform(moved[inlier], tgt[nn[inlier]])
        cand = step @ transform
        cand_moved = cand.apply(src)
        new_cost, cand_nn, cand_inlier, cand_d2 = _evaluate(index, cand_moved, gate2)
        if new_cost > cost:
            # rounding noise at the optimum; keep the better pose
            break
        transform, moved, nn, inlier, d2 = cand, cand_moved, cand_nn, cand_inlier, cand_d2
        history.append(new_cost)
        iterations = it
        improvement = cost - new_cost
        cost = new_cost
        log.debug("icp iter %d cost %.9g inliers %d", it, cost, int(inlier.sum()))
        if improvement < params.convergence_epsilon:
            break
    rmse = float(np.sqrt(d2[inlier].mean()))
    return IcpResult(transform, rmse, iterations, int(inlier.sum()), history)
