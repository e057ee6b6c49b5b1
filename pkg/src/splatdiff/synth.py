"""Synthetic old/new scene pairs with exact change labels, and a benchmark harness.

A scene is a ground square plus axis-aligned boxes, sampled on their
surfaces. The old session becomes a Gaussian map (random but valid
attributes); the new session becomes a LiDAR submap, optionally noisy and
expressed in an offset frame. Boxes that change between sessions float
``change_clearance`` metres above the ground and keep ``min_gap`` metres of
horizontal clearance from every other box, so their labels are unambiguous.
The 2.5 m defaults exceed the 2.0 m ICP gate, which keeps changed structure
out of the registration.
Labels come from which surface a sample was drawn on, never from distances.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from .detection import DetectionParams
from .model import ChangeReport, GaussianMap, PointCloud, RigidTransform, SplatError, logit, sh_coeff_count
from .registration import IcpParams
from .update import UpdateParams, update_pipeline

log = logging.getLogger(__name__)


class SpecError(SplatError):
    pass


@dataclass(frozen=True)
class ScenePairSpec:
    seed: int = 0
    extent: float = 40.0
    ground_density: float = 20.0
    object_density: float = 20.0
    n_static_objects: int = 6
    n_added: int = 2
    n_removed: int = 2
    object_size_range: tuple = (1.0, 3.0)
    sensor_noise_sigma: float = 0.0
    frame_offset: RigidTransform = field(default_factory=RigidTransform.identity)
    change_clearance: float = 2.5
    min_gap: float = 2.5
    sh_degree: int = 3

    def __post_init__(self):
        object.__setattr__(self, "object_size_range", tuple(float(v) for v in self.object_size_range))
        for name, ok, msg in self._checks():
            if not ok:
                raise SpecError(f"$.{name}: {msg}")

    def _checks(self):
        lo, hi = self.object_size_range if len(self.object_size_range) == 2 else (float("nan"),) * 2
        counts = (self.n_static_objects, self.n_added, self.n_removed)
        return [
            ("extent", self.extent > 0, "must be > 0"),
            ("ground_density", self.ground_density > 0, "must be > 0"),
            ("object_density", self.object_density > 0, "must be > 0"),
            ("n_static_objects", counts[0] >= 0, "must be >= 0"),
            ("n_added", counts[1] >= 0, "must be >= 0"),
            ("n_removed", counts[2] >= 0, "must be >= 0"),
            ("object_size_range", 0 < lo <= hi, "must be [min, max] with 0 < min <= max"),
            ("sensor_noise_sigma", self.sensor_noise_sigma >= 0, "must be >= 0"),
            ("change_clearance", self.change_clearance >= 0, "must be >= 0"),
            ("min_gap", self.min_gap >= 0, "must be >= 0"),
            ("sh_degree", self.sh_degree in range(4), "must be in 0..3"),
        ]

    def with_(self, **changes) -> ScenePairSpec:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return ScenePairSpec(**d)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["object_size_range"] = list(self.object_size_range)
        d["frame_offset"] = {"matrix": self.frame_offset.to_list()}
        return d

    @classmethod
    def from_dict(cls, d, path: str = "$") -> ScenePairSpec:
        if not isinstance(d, dict):
            raise SpecError(f"{path}: expected an object")
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, val in d.items():
            where = f"{path}.{key}"
            if key not in known:
                raise SpecError(f"{where}: unknown field")
            if key == "frame_offset":
                try:
                    mat = val["matrix"] if isinstance(val, dict) else val
                    kwargs[key] = RigidTransform.from_matrix(mat)
                except (KeyError, TypeError, ValueError, SplatError) as exc:
                    raise SpecError(f"{where}: {exc}") from None
            elif key == "object_size_range":
                if not (isinstance(val, (list, tuple)) and len(val) == 2 and all(_is_num(v) for v in val)):
                    raise SpecError(f"{where}: expected [min, max]")
                kwargs[key] = tuple(val)
            elif key in ("seed", "n_static_objects", "n_added", "n_removed", "sh_degree"):
                if not (isinstance(val, int) and not isinstance(val, bool)):
                    raise SpecError(f"{where}: expected an integer")
                kwargs[key] = val
            else:
                if not _is_num(val):
                    raise SpecError(f"{where}: expected a number")
                kwargs[key] = float(val)
        try:
            return cls(**kwargs)
        except SpecError as exc:
            msg = str(exc)
            raise SpecError(path + msg[1:] if msg.startswith("$") else f"{path}: {msg}") from None


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray


@dataclass(frozen=True)
class TruthLabels:
    submap_added: np.ndarray  # bool per submap point
    map_removed: np.ndarray  # bool per Gaussian

    @property
    def ep(self) -> np.ndarray:
        return np.flatnonzero(self.submap_added)

    @property
    def dp(self) -> np.ndarray:
        return np.flatnonzero(self.map_removed)


@dataclass
class ScenePair:
    old_map: GaussianMap
    submap: PointCloud
    truth: TruthLabels
    transform: RigidTransform  # old-map frame -> submap frame
    boxes: dict


def _place_boxes(spec: ScenePairSpec, rng: np.random.Generator) -> dict[str, list[Box]]:
    lo_s, hi_s = spec.object_size_range
    half = spec.extent / 2.0
    placed: list[tuple[str, Box]] = []
    order = ["added"] * spec.n_added + ["removed"] * spec.n_removed + ["static"] * spec.n_static_objects
    for kind in order:
        for _ in range(2000):
            size = rng.uniform(lo_s, hi_s, 3)
            if size[0] >= spec.extent or size[1] >= spec.extent:
                raise SpecError(f"$.object_size_range: boxes of {size[:2]} m do not fit in extent {spec.extent}")
            c = rng.uniform(-half + size[:2] / 2, half - size[:2] / 2)
            z0 = spec.change_clearance if kind != "static" else 0.0
            box = Box(np.array([c[0] - size[0] / 2, c[1] - size[1] / 2, z0]),
                      np.array([c[0] + size[0] / 2, c[1] + size[1] / 2, z0 + size[2]]))
            if all(_xy_gap(box, other) > spec.min_gap for _, other in placed):
                placed.append((kind, box))
                break
        else:
            raise SpecError(
                "$: cannot place boxes without overlapping changed regions; "
                "reduce object counts/sizes or min_gap, or enlarge extent"
            )
    out: dict[str, list[Box]] = {"static": [], "added": [], "removed": []}
    for kind, box in placed:
        out[kind].append(box)
    return out


def _xy_gap(a: Box, b: Box) -> float:
    gx = max(a.lo[0] - b.hi[0], b.lo[0] - a.hi[0], 0.0)
    gy = max(a.lo[1] - b.hi[1], b.lo[1] - a.hi[1], 0.0)
    return float(np.hypot(gx, gy))


def _sample_box(box: Box, density: float, rng: np.random.Generator) -> np.ndarray:
    lo, hi = box.lo, box.hi
    parts = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        area = (hi[u] - lo[u]) * (hi[v] - lo[v])
        count = int(round(density * area))
        for side in (lo[axis], hi[axis]):
            p = np.empty((count, 3))
            p[:, axis] = side
            p[:, u] = rng.uniform(lo[u], hi[u], count)
            p[:, v] = rng.uniform(lo[v], hi[v], count)
            parts.append(p)
    return np.concatenate(parts, axis=0)


def box_sample_count(box: Box, density: float) -> int:
    size = box.hi - box.lo
    return 2 * sum(int(round(density * size[u] * size[v])) for u, v in ((1, 2), (0, 2), (0, 1)))


def _sample_session(spec, boxes_by_kind, kinds, rng):
    half = spec.extent / 2.0
    n_ground = int(round(spec.ground_density * spec.extent ** 2))
    ground = np.zeros((n_ground, 3))
    ground[:, :2] = rng.uniform(-half, half, (n_ground, 2))
    pts = [ground]
    flags = [np.zeros(n_ground, bool)]
    for kind in ("static",) + kinds:
        for box in boxes_by_kind[kind]:
            p = _sample_box(box, spec.object_density, rng)
            pts.append(p)
            flags.append(np.full(len(p), kind != "static"))
    return np.concatenate(pts), np.concatenate(flags)


def random_features(n: int, sh_degree: int, rng: np.random.Generator):
    """Plausible splat attributes in stored convention: (log scales, quats, sh, logit opacities)."""
    scales = np.log(rng.uniform(0.02, 0.3, (n, 3)))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sh = rng.normal(0.0, 0.3, (n, 3, sh_coeff_count(sh_degree)))
    opac = logit(rng.uniform(0.05, 0.99, n))
    return scales, q, sh, opac


def gen_scene_pair(spec: ScenePairSpec) -> ScenePair:
    """Deterministic in ``spec.seed``."""
    root = np.random.SeedSequence(spec.seed)
    s_layout, s_old, s_new, s_feat, s_noise = (np.random.default_rng(s) for s in root.spawn(5))
    boxes = _place_boxes(spec, s_layout)
    old_pts, removed = _sample_session(spec, boxes, ("removed",), s_old)
    new_pts, added = _sample_session(spec, boxes, ("added",), s_new)
    if spec.sensor_noise_sigma > 0:
        new_pts = new_pts + s_noise.normal(0.0, spec.sensor_noise_sigma, new_pts.shape)
    scales, q, sh, opac = random_features(len(old_pts), spec.sh_degree, s_feat)
    old_map = GaussianMap(old_pts, scales, q, sh, opac, sh_degree=spec.sh_degree, frame_label="old")
    submap = PointCloud(spec.frame_offset.apply(new_pts))
    return ScenePair(old_map, submap, TruthLabels(added, removed), spec.frame_offset, boxes)


@dataclass
class DetectionScore:
    ep_precision: float
    ep_recall: float
    dp_precision: float
    dp_recall: float
    timings: dict = field(default_factory=dict)

    def scores(self) -> dict:
        return {k: getattr(self, k) for k in ("ep_precision", "ep_recall", "dp_precision", "dp_recall")}


def _pr(predicted: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    tp = int(np.count_nonzero(truth[predicted]))
    n_pred = len(predicted)
    n_true = int(np.count_nonzero(truth))
    precision = tp / n_pred if n_pred else 1.0
    recall = tp / n_true if n_true else 1.0
    return precision, recall


def eval_detection(report: ChangeReport, truth: TruthLabels) -> DetectionScore:
    if len(report.ep_mean_dist) != len(truth.submap_added):
        raise SplatError(f"EP index space {len(report.ep_mean_dist)} != truth {len(truth.submap_added)}")
    if len(report.dp_mean_dist) != len(truth.map_removed):
        raise SplatError(f"DP index space {len(report.dp_mean_dist)} != truth {len(truth.map_removed)}")
    ep_p, ep_r = _pr(report.ep_indices, truth.submap_added)
    dp_p, dp_r = _pr(report.dp_indices, truth.map_removed)
    return DetectionScore(ep_p, ep_r, dp_p, dp_r)


SCORE_KEYS = ("ep_precision", "ep_recall", "dp_precision", "dp_recall")


def run_pair(spec: ScenePairSpec, icp_params=None, det_params=None, upd_params=None) -> dict:
    row: dict = {"seed": spec.seed, "sensor_noise_sigma": spec.sensor_noise_sigma}
    try:
        t0 = time.perf_counter()
        pair = gen_scene_pair(spec)
        gen_time = time.perf_counter() - t0
        res = update_pipeline(pair.old_map, pair.submap, icp_params, det_params, upd_params)
        score = eval_detection(res.report, pair.truth)
        err = pair.transform.compose(res.icp.transform.inverse())
        m, n_ep, n_dp = len(pair.old_map), len(res.report.ep_indices), len(res.report.dp_indices)
        row.update(score.scores())
        row.update(
            status="ok",
            n_map=m,
            n_submap=len(pair.submap),
            n_ep=n_ep,
            n_dp=n_dp,
            n_prior=len(res.prior),
            count_identity=len(res.prior) == m - n_dp + n_ep,
            carried_fraction=res.carried_fraction,
            rot_err_deg=float(np.degrees(err.rotation_angle())),
            trans_err_m=float(np.linalg.norm(res.icp.transform.translation - pair.transform.translation)),
            icp_iterations=res.icp.iterations_used,
            timings={"generate": gen_time, **res.timings},
        )
    except Exception as exc:  # a failed pair is recorded, the batch goes on
        log.warning("pair seed=%s failed: %s", spec.seed, exc)
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def _run_pair_star(args):
    return run_pair(*args)


@dataclass
class BenchReport:
    rows: list
    aggregate: dict

    def to_dict(self, timings: bool = True) -> dict:
        """Wall-clock timings are the only nondeterministic fields; ``timings=False`` drops them."""
        if timings:
            return {"pairs": self.rows, "aggregate": self.aggregate}
        strip = lambda d: {k: v for k, v in d.items() if k != "timings"}  # noqa: E731
        return {"pairs": [strip(r) for r in self.rows], "aggregate": strip(self.aggregate)}

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(self.to_dict(timings), indent=2, sort_keys=True)

    def to_table(self) -> str:
        cols = ["seed", "sigma", "status", *SCORE_KEYS, "n_ep", "n_dp", "carried", "rot_deg", "trans_m", "total_s"]
        lines = [cols]
        for r in self.rows:
            if r["status"] != "ok":
                lines.append([str(r["seed"]), f"{r['sensor_noise_sigma']:g}", "FAILED"] + [""] * (len(cols) - 3))
                continue
            lines.append(
                [str(r["seed"]), f"{r['sensor_noise_sigma']:g}", "ok"]
                + [f"{r[k]:.4f}" for k in SCORE_KEYS]
                + [str(r["n_ep"]), str(r["n_dp"]), f"{r['carried_fraction']:.4f}",
                   f"{r['rot_err_deg']:.2e}", f"{r['trans_err_m']:.2e}", f"{sum(r['timings'].values()):.2f}"]
            )
        a = self.aggregate
        if a.get("n_ok"):
            lines.append(
                ["mean", "", f"{a['n_ok']}/{a['n_pairs']}"]
                + [f"{a[k]:.4f}" for k in SCORE_KEYS]
                + ["", "", f"{a['carried_fraction']:.4f}", "", "", f"{sum(a['timings'].values()):.2f}"]
            )
        widths = [max(len(row[i]) for row in lines) for i in range(len(cols))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in lines)


def _aggregate(rows: list) -> dict:
    ok = [r for r in rows if r["status"] == "ok"]
    agg: dict = {"n_pairs": len(rows), "n_ok": len(ok), "n_failed": len(rows) - len(ok)}
    if not ok:
        return agg
    for k in (*SCORE_KEYS, "carried_fraction", "rot_err_deg", "trans_err_m"):
        agg[k] = float(np.mean([r[k] for r in ok]))
    stages = ok[0]["timings"].keys()
    agg["timings"] = {s: float(np.mean([r["timings"][s] for r in ok])) for s in stages}
    agg["count_identity"] = all(r["count_identity"] for r in ok)
    return agg


def bench_report(
    specs,
    icp_params: IcpParams | None = None,
    det_params: DetectionParams | None = None,
    upd_params: UpdateParams | None = None,
    workers: int = 1,
) -> BenchReport:
    specs = list(specs)
    if not specs:
        raise SpecError("$: at least one scene pair spec is required")
    jobs = [(s, icp_params, det_params, upd_params) for s in specs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_pair_star, jobs))
    else:
        rows = [_run_pair_star(j) for j in jobs]
    return BenchReport(rows, _aggregate(rows))


def load_specs(doc, base_seed: int | None = None, repeat: int = 1) -> list[ScenePairSpec]:
    """Specs from parsed JSON: one spec object, a list, or ``{"pairs": [...]}``."""
    if isinstance(doc, dict) and "pairs" in doc:
        items, path = doc["pairs"], "$.pairs"
        if not isinstance(items, list):
            raise SpecError("$.pairs: expected a list")
        specs = [ScenePairSpec.from_dict(d, f"{path}[{i}]") for i, d in enumerate(items)]
    elif isinstance(doc, list):
        specs = [ScenePairSpec.from_dict(d, f"$[{i}]") for i, d in enumerate(doc)]
    else:
        specs = [ScenePairSpec.from_dict(doc)]
    if base_seed is not None or repeat > 1:
        out = []
        for s in specs:
            start = s.seed if base_seed is None else base_seed
            out.extend(s.with_(seed=start + i) for i in range(repeat))
        specs = out
    return specs
