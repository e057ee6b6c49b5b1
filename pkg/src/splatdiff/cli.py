"""``splatdiff`` command line: assemble, register, detect, update, bench, pearson.

Defaults reproduce the reference configuration: ICP gate 2.0 m, 100
iterations, h = 10 neighbours, r = r' = 1.0 m. Results go to files or stdout;
diagnostics go to stderr. Exit status is 0 only when every output was written.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import _accel
from .depth import pearson_stats, read_depth
from .detection import DetectionParams, detect_changes
from .model import RigidTransform, SplatError
from .registration import IcpParams, icp_align
from .splat_io import (
    assemble_submap,
    read_point_cloud,
    read_poses,
    read_splat_ply,
    voxel_downsample,
    write_point_cloud,
    write_splat_ply,
)
from .synth import bench_report, load_specs
from .update import UpdateParams, update_pipeline

log = logging.getLogger("splatdiff")

SCAN_SUFFIXES = (".ply", ".xyz", ".txt")


def _write_text(path, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(path).write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")


def _load_transform(path) -> RigidTransform:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        mat = doc["matrix"] if isinstance(doc, dict) else doc
        return RigidTransform.from_matrix(mat)
    except (OSError, ValueError, KeyError, TypeError, SplatError) as exc:
        raise SplatError(f"cannot parse transform file {path}: {exc}") from None


def _load_submap(path, voxel):
    cloud = read_point_cloud(path)
    if voxel:
        before = len(cloud)
        cloud = voxel_downsample(cloud, voxel)
        log.info("voxel %.3g m: %d -> %d submap points", voxel, before, len(cloud))
    return cloud


def _icp_params(a) -> IcpParams:
    cap = None if a.max_source_points <= 0 else a.max_source_points
    return IcpParams(a.max_dist, a.max_iter, a.icp_eps, cap, a.seed)


def _det_params(a) -> DetectionParams:
    return DetectionParams(a.h, a.r, a.r_prime)


def cmd_assemble(a) -> int:
    scan_dir = Path(a.scans)
    files = sorted(p for p in scan_dir.iterdir() if p.suffix.lower() in SCAN_SUFFIXES)
    if not files:
        raise SplatError(f"no scan files in {scan_dir}")
    poses = read_poses(a.poses)
    scans = []
    for f in files:
        if f.stem not in poses:
            raise SplatError(f"missing pose for scan {f.stem}")
        scans.append((read_point_cloud(f), poses[f.stem]))
    sub = assemble_submap(scans)
    if a.voxel:
        sub = voxel_downsample(sub, a.voxel)
    write_point_cloud(sub, a.out)
    print(len(sub))
    log.info("assembled %d scans -> %s", len(scans), a.out)
    return 0


def cmd_register(a) -> int:
    gmap = read_splat_ply(a.map)
    sub = _load_submap(a.submap, a.voxel)
    init = _load_transform(a.init) if a.init else None
    res = icp_align(gmap.positions, sub.points, _icp_params(a), init=init)
    log.info("icp: %d iterations, rmse %.6g, %d correspondences", res.iterations_used, res.final_rmse, res.correspondence_count)
    _write_text(a.out, res.to_json())
    return 0


def cmd_detect(a) -> int:
    transform = _load_transform(a.transform)
    gmap = read_splat_ply(a.map)
    sub = _load_submap(a.submap, a.voxel)
    report = detect_changes(gmap, sub, transform, _det_params(a))
    _write_text(a.out, json.dumps(report.to_dict()))
    if a.ep_ply:
        write_point_cloud(sub.points[report.ep_indices], a.ep_ply)
    if a.dp_ply:
        write_point_cloud(transform.apply(gmap.positions)[report.dp_indices], a.dp_ply)
    log.info("detect: %d emerging, %d disappearing", len(report.ep_indices), len(report.dp_indices))
    return 0


def cmd_update(a) -> int:
    gmap = read_splat_ply(a.map)
    sub = _load_submap(a.submap, a.voxel)
    init = _load_transform(a.init) if a.init else None
    res = update_pipeline(gmap, sub, _icp_params(a), _det_params(a), UpdateParams(a.e), init=init)
    out = Path(a.out)
    write_splat_ply(res.prior, out)
    prov = Path(a.provenance) if a.provenance else out.with_suffix(".provenance.json")
    prov.write_text(res.provenance_json() + "\n", encoding="utf-8")
    if a.report:
        Path(a.report).write_text(json.dumps(res.report.to_dict()) + "\n", encoding="utf-8")
    if a.icp_out:
        Path(a.icp_out).write_text(res.icp.to_json() + "\n", encoding="utf-8")
    log.info(
        "update: %d -> %d Gaussians (%d removed, %d inserted)",
        len(gmap), len(res.prior), len(res.report.dp_indices), len(res.report.ep_indices),
    )
    return 0


def cmd_bench(a) -> int:
    if a.spec:
        try:
            doc = json.loads(Path(a.spec).read_text(encoding="utf-8"))
        except ValueError as exc:
            raise SplatError(f"$: invalid JSON in {a.spec}: {exc}") from None
        specs = load_specs(doc, base_seed=a.seed, repeat=a.repeat)
    else:
        specs = load_specs({}, base_seed=a.seed, repeat=a.repeat)
    rep = bench_report(specs, _icp_params(a), _det_params(a), UpdateParams(a.e), workers=a.workers)
    if a.out:
        Path(a.out).write_text(rep.to_json(a.timings) + "\n", encoding="utf-8")
        print(rep.to_table())
    else:
        print(rep.to_json(a.timings))
        print(rep.to_table(), file=sys.stderr)
    return 0 if rep.aggregate["n_failed"] == 0 else 1


def cmd_pearson(a) -> int:
    est = read_depth(a.depth_a, a.scale)
    ren = read_depth(a.depth_b, a.scale if a.scale_b is None else a.scale_b)
    res = pearson_stats(est, ren)
    if res.degenerate:
        log.warning("zero-variance depth map; loss reported as 1.0")
    print(json.dumps(res.to_dict()))
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_icp(p) -> None:
    p.add_argument("--max-dist", type=float, default=2.0, help="ICP correspondence gate in metres")
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--icp-eps", type=float, default=1e-7, help="stop when RMSE improves by less than this")
    p.add_argument("--max-source-points", type=int, default=100_000, help="ICP source subset size; 0 = all")
    p.add_argument("--init", default=None, help="initial transform JSON ({'matrix': [16 floats]})")


def _add_det(p) -> None:
    p.add_argument("--h", type=int, default=10, help="neighbours per mean-distance test")
    p.add_argument("--r", type=float, default=1.0, help="emerging threshold in metres")
    p.add_argument("--r-prime", type=float, default=1.0, help="disappearing threshold in metres")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splatdiff", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("assemble", help="concatenate posed scans into a submap")
    p.add_argument("scans", help="directory of scan files (.ply/.xyz); scan id = file stem")
    p.add_argument("poses", help="pose JSONL")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--voxel", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("register", help="ICP-align a splat map to a submap")
    p.add_argument("map")
    p.add_argument("submap")
    p.add_argument("-o", "--out", default=None, help="transform JSON (default stdout)")
    p.add_argument("--voxel", type=float, default=None)
    _add_icp(p)
    _add_common(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("detect", help="find emerging and disappearing points")
    p.add_argument("map")
    p.add_argument("submap")
    p.add_argument("transform", help="map->submap transform JSON")
    p.add_argument("-o", "--out", default=None, help="report JSON (default stdout)")
    p.add_argument("--ep-ply", default=None)
    p.add_argument("--dp-ply", default=None)
    p.add_argument("--voxel", type=float, default=None)
    _add_det(p)
    _add_common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("update", help="build the updated Gaussian prior")
    p.add_argument("map")
    p.add_argument("submap")
    p.add_argument("-o", "--out", required=True, help="prior splat PLY")
    p.add_argument("--provenance", default=None, help="default: <out>.provenance.json")
    p.add_argument("--report", default=None)
    p.add_argument("--icp-out", default=None)
    p.add_argument("--e", type=int, default=10, help="donor Gaussians per emerging point")
    p.add_argument("--voxel", type=float, default=None)
    _add_icp(p)
    _add_det(p)
    _add_common(p)
    p.set_defaults(func=cmd_update)

    p = sub.add_parser("bench", help="run the synthetic change-detection benchmark")
    p.add_argument("spec", nargs="?", default=None, help="scene-pair spec JSON (default: built-in spec)")
    p.add_argument("-o", "--out", default=None)
    p.add_argument("--repeat", type=int, default=1, help="pairs per spec, with consecutive seeds")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--e", type=int, default=10)
    p.add_argument("--timings", action="store_true", help="include wall-clock stage timings in the JSON")
    _add_icp(p)
    _add_det(p)
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("pearson", help="Pearson depth loss between two depth maps")
    p.add_argument("depth_a")
    p.add_argument("depth_b")
    p.add_argument("--scale", type=float, default=1.0, help="multiplier for integer PNG depth")
    p.add_argument("--scale-b", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_pearson)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    level = logging.WARNING - 10 * min(a.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(a, "seed", None) is None and a.command != "bench":
        a.seed = 0
    try:
        _accel.set_num_threads(a.threads)
        return a.func(a)
    except (SplatError, OSError) as exc:
        print(f"splatdiff {a.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
