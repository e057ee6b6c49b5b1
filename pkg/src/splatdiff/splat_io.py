"""Splat PLY, point-cloud PLY/XYZ and pose JSONL I/O, plus submap assembly.

Splat PLY layout (binary little-endian, all float32, one ``vertex`` element):

    x y z nx ny nz f_dc_0..2 f_rest_0..(3K-1) opacity scale_0..2 rot_0..3

where K = (degree+1)^2 - 1 and ``f_rest`` is channel-major (all red
coefficients, then green, then blue), ``scale_*`` is log-scale, ``opacity``
is a logit and ``rot_*`` is (w, x, y, z).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import GaussianMap, PointCloud, RigidTransform, SplatError, sh_coeff_count


class PlyFormatError(SplatError):
    pass


class EmptyMapError(SplatError):
    pass


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_ENDIAN = {"binary_little_endian": "<", "binary_big_endian": ">", "ascii": "<"}


@dataclass
class _PlyHeader:
    fmt: str
    elements: list  # (name, count, [(prop, type)])
    data_offset: int


def _read_header(raw: bytes, path) -> _PlyHeader:
    if not raw.startswith(b"ply"):
        raise PlyFormatError(f"{path}: not a PLY file")
    end = raw.find(b"end_header")
    if end < 0:
        raise PlyFormatError(f"{path}: missing end_header")
    nl = raw.find(b"\n", end)
    offset = len(raw) if nl < 0 else nl + 1
    fmt = None
    elements: list = []
    for line in raw[:end].decode("ascii", errors="replace").splitlines()[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
            if fmt not in _ENDIAN:
                raise PlyFormatError(f"{path}: unsupported PLY format {fmt}")
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyFormatError(f"{path}: property before any element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], "list"))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise PlyFormatError(f"{path}: unknown property type {tok[1]}")
                elements[-1][2].append((tok[2], tok[1]))
    if fmt is None:
        raise PlyFormatError(f"{path}: missing format line")
    return _PlyHeader(fmt, elements, offset)


def _read_vertices(path) -> np.ndarray:
    """Return the ``vertex`` element as a structured array (native-endian)."""
    raw = Path(path).read_bytes()
    hdr = _read_header(raw, path)
    if not hdr.elements or hdr.elements[0][0] != "vertex":
        raise PlyFormatError(f"{path}: first element must be 'vertex'")
    _, count, props = hdr.elements[0]
    if any(t == "list" for _, t in props):
        raise PlyFormatError(f"{path}: list properties on vertex are not supported")
    endian = _ENDIAN[hdr.fmt]
    dtype = np.dtype([(name, endian + _PLY_TYPES[t]) for name, t in props])
    if hdr.fmt == "ascii":
        text = raw[hdr.data_offset:].decode("ascii").splitlines()
        rows = [ln for ln in text if ln.strip()][:count]
        if len(rows) < count:
            raise PlyFormatError(f"{path}: expected {count} vertices, found {len(rows)}")
        out = np.empty(count, dtype=dtype)
        for i, ln in enumerate(rows):
            vals = ln.split()
            if len(vals) < len(props):
                raise PlyFormatError(f"{path}: vertex {i} has {len(vals)} values, expected {len(props)}")
            out[i] = tuple(float(v) for v in vals[: len(props)])
        return out
    need = count * dtype.itemsize
    if len(raw) - hdr.data_offset < need:
        raise PlyFormatError(f"{path}: truncated vertex data")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=hdr.data_offset)


def _degree_from_rest(n_rest: int, path) -> int:
    for d in range(4):
        if 3 * (sh_coeff_count(d) - 1) == n_rest:
            return d
    raise PlyFormatError(f"{path}: {n_rest} f_rest properties do not match any SH degree")


def read_splat_ply(path, allow_empty: bool = False) -> GaussianMap:
    v = _read_vertices(path)
    names = set(v.dtype.names or ())
    n_rest = sum(1 for nm in names if re.fullmatch(r"f_rest_\d+", nm))
    degree = _degree_from_rest(n_rest, path)
    k = sh_coeff_count(degree)
    required = (
        ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
        + [f"f_rest_{i}" for i in range(n_rest)]
        + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    )
    for nm in required:
        if nm not in names:
            raise PlyFormatError(f"missing property {nm}")
    n = len(v)
    if n == 0 and not allow_empty:
        raise EmptyMapError(f"{path}: splat file has no Gaussians")

    def col(*cols):
        return np.stack([v[c].astype(np.float64) for c in cols], axis=1) if n else np.zeros((0, len(cols)))

    sh = np.zeros((n, 3, k))
    sh[:, :, 0] = col("f_dc_0", "f_dc_1", "f_dc_2")
    if k > 1:
        rest = col(*[f"f_rest_{i}" for i in range(n_rest)])
        sh[:, :, 1:] = rest.reshape(n, 3, k - 1)
    rot = col("rot_0", "rot_1", "rot_2", "rot_3")
    norm = np.linalg.norm(rot, axis=1)
    fix = (norm > 0) & (np.abs(norm - 1.0) > 1e-6)
    rot[fix] /= norm[fix, None]
    return GaussianMap(
        col("x", "y", "z"),
        col("scale_0", "scale_1", "scale_2"),
        rot,
        sh,
        col("opacity")[:, 0] if n else np.zeros(0),
        sh_degree=degree,
        frame_label=Path(path).stem,
    )


def _splat_property_names(degree: int) -> list[str]:
    n_rest = 3 * (sh_coeff_count(degree) - 1)
    return (
        ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        + [f"f_rest_{i}" for i in range(n_rest)]
        + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    )


def _header(count: int, props: list[tuple[str, str]], fmt: str = "binary_little_endian") -> bytes:
    lines = ["ply", f"format {fmt} 1.0", f"element vertex {count}"]
    lines += [f"property {t} {nm}" for nm, t in props]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def write_splat_ply(gmap: GaussianMap, path) -> None:
    names = _splat_property_names(gmap.sh_degree)
    n = len(gmap)
    k = sh_coeff_count(gmap.sh_degree)
    cols = np.concatenate(
        [
            gmap.positions,
            np.zeros((n, 3)),
            gmap.sh[:, :, 0],
            gmap.sh[:, :, 1:].reshape(n, 3 * (k - 1)),
            gmap.opacities[:, None],
            gmap.scales,
            gmap.rotations,
        ],
        axis=1,
    ).astype("<f4")
    try:
        with open(path, "wb") as fh:
            fh.write(_header(n, [(nm, "float") for nm in names]))
            fh.write(np.ascontiguousarray(cols).tobytes())
    except OSError as exc:
        raise SplatError(f"cannot write {path}: {exc}") from exc


def read_point_cloud(path) -> PointCloud:
    """PLY with x/y/z properties (others ignored) or whitespace-delimited XYZ text."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(3)
    if magic == b"ply":
        v = _read_vertices(path)
        for c in ("x", "y", "z"):
            if c not in (v.dtype.names or ()):
                raise PlyFormatError(f"missing property {c}")
        pts = np.stack([v[c].astype(np.float64) for c in "xyz"], axis=1) if len(v) else np.zeros((0, 3))
        bad = np.flatnonzero(~np.all(np.isfinite(pts), axis=1))
        if len(bad):
            raise SplatError(f"{path}: non-finite point at row {int(bad[0])}")
        return PointCloud(pts)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            tok = s.replace(",", " ").split()
            try:
                xyz = [float(t) for t in tok[:3]]
            except ValueError:
                raise SplatError(f"{path}:{lineno}: cannot parse row {s!r}") from None
            if len(xyz) < 3:
                raise SplatError(f"{path}:{lineno}: expected 3 coordinates, got {len(xyz)}")
            if not all(np.isfinite(xyz)):
                raise SplatError(f"{path}:{lineno}: non-finite coordinate in row {s!r}")
            rows.append(xyz)
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def write_point_cloud(cloud, path, dtype: str = "double") -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    np_t = "<" + _PLY_TYPES[dtype]
    path = Path(path)
    if path.suffix.lower() in (".xyz", ".txt"):
        np.savetxt(path, pts, fmt="%.17g")
        return
    with open(path, "wb") as fh:
        fh.write(_header(len(pts), [(c, dtype) for c in "xyz"]))
        fh.write(np.ascontiguousarray(pts.astype(np_t)).tobytes())


@dataclass(frozen=True)
class PoseRecord:
    scan_id: str
    transform: RigidTransform  # sensor -> world


def read_poses(path) -> dict[str, PoseRecord]:
    """JSON-lines pose file: ``{"scan_id": str, "matrix": [16 row-major floats]}`` per line."""
    out: dict[str, PoseRecord] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid = str(rec["scan_id"])
                tf = RigidTransform.from_matrix(rec["matrix"])
            except (ValueError, KeyError, TypeError, SplatError) as exc:
                raise SplatError(f"{path}:{lineno}: bad pose record: {exc}") from None
            out[sid] = PoseRecord(sid, tf)
    return out


def write_poses(poses, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in poses:
            fh.write(json.dumps({"scan_id": p.scan_id, "matrix": p.transform.to_list()}) + "\n")


def assemble_submap(scans) -> PointCloud:
    """Concatenate posed scans in order, each mapped into the world frame by its pose."""
    scans = list(scans)
    if not scans:
        raise SplatError("no scans to assemble")
    parts = [pose.transform.apply(cloud.points) for cloud, pose in scans]
    return PointCloud(np.concatenate(parts, axis=0))


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Keep the first point (in input order) of every occupied voxel."""
    if voxel <= 0:
        raise SplatError("voxel size must be > 0")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return PointCloud(cloud.points[np.sort(first)])
