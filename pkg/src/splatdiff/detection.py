"""Emerging / disappearing point detection by mean kNN distance.

A query point is flagged when the mean distance to its ``h`` nearest
neighbours in the other epoch is at least the threshold. Emerging points are
submap points far from the (aligned) map; disappearing points are map
positions far from the submap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ChangeReport, GaussianMap, PointCloud, RigidTransform, SplatError
from .spatial import KdIndex


@dataclass(frozen=True)
class DetectionParams:
    h: int = 10
    r: float = 1.0
    r_prime: float = 1.0

    def __post_init__(self):
        if self.h < 1:
            raise SplatError("h must be >= 1")
        if not (self.r > 0 and self.r_prime > 0):
            raise SplatError("thresholds r and r_prime must be > 0")


def _as_index(db, what: str) -> KdIndex:
    if isinstance(db, KdIndex):
        return db
    pts = db.points if isinstance(db, PointCloud) else np.asarray(db, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise SplatError(f"{what} is empty; it is the kNN database")
    return KdIndex(pts)


def _query_points(q) -> np.ndarray:
    if isinstance(q, PointCloud):
        return q.points
    return np.asarray(q, dtype=np.float64).reshape(-1, 3)


def _flag(queries: np.ndarray, index: KdIndex, h: int, threshold: float):
    mean = index.mean_knn_distance(queries, h) if len(queries) else np.zeros(0)
    return np.flatnonzero(mean >= threshold), mean


def detect_emerging(submap, map_positions, params: DetectionParams | None = None):
    """Submap points whose mean distance to the ``h`` nearest map positions is >= r.

    ``map_positions`` may be a prebuilt :class:`KdIndex`.
    """
    params = params or DetectionParams()
    index = _as_index(map_positions, "map positions")
    return _flag(_query_points(submap), index, params.h, params.r)


def detect_disappearing(map_positions, submap, params: DetectionParams | None = None):
    """Map positions whose mean distance to the ``h`` nearest submap points is >= r'.

    ``submap`` may be a prebuilt :class:`KdIndex`.
    """
    params = params or DetectionParams()
    index = _as_index(submap, "submap")
    return _flag(_query_points(map_positions), index, params.h, params.r_prime)


def detect_changes(
    old_map: GaussianMap,
    submap: PointCloud,
    transform: RigidTransform | None = None,
    params: DetectionParams | None = None,
    submap_index: KdIndex | None = None,
) -> ChangeReport:
    """Move the map into the submap frame, then run both detectors.

    ``transform=None`` means the map is already expressed in the submap frame.
    """
    params = params or DetectionParams()
    positions = old_map.positions if transform is None else transform.apply(old_map.positions)
    if len(positions) == 0:
        raise SplatError("map positions are empty; they are the kNN database")
    if len(submap) == 0:
        raise SplatError("submap is empty; it is the kNN database")
    map_index = KdIndex(positions)
    sub_index = submap_index if submap_index is not None else KdIndex(submap.points)
    ep, ep_dist = detect_emerging(submap, map_index, params)
    dp, dp_dist = detect_disappearing(positions, sub_index, params)
    echo = {
        "h": params.h,
        "r": params.r,
        "r_prime": params.r_prime,
        "h_effective_ep": min(params.h, len(map_index)),
        "h_effective_dp": min(params.h, len(sub_index)),
    }
    return ChangeReport(ep, dp, ep_dist, dp_dist, echo)
