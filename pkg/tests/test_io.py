import json
import struct
from pathlib import Path

import numpy as np
import pytest

from splatdiff.model import PointCloud, RigidTransform, SplatError
from splatdiff.splat_io import (
    EmptyMapError,
    PlyFormatError,
    PoseRecord,
    assemble_submap,
    read_point_cloud,
    read_poses,
    read_splat_ply,
    voxel_downsample,
    write_point_cloud,
    write_poses,
    write_splat_ply,
)

from conftest import random_map

GOLDEN = Path(__file__).parent / "data" / "golden.ply"
f32 = np.float32


def test_golden_values():
    g = read_splat_ply(GOLDEN)
    assert len(g) == 3 and g.sh_degree == 1
    assert g.positions[0].tolist() == [1.5, -2.25, 3.0]
    assert g.positions[2, 2] == -0.0078125
    # dc, then channel-major rest: red band-1 coefficients are f_rest_0..2
    assert g.sh[0, :, 0].tolist() == [0.5, 0.25, -0.125]
    assert g.sh[0, 0, 1:].tolist() == [0.0625, -0.5, 1.0]
    assert g.sh[0, 1, 1:].tolist() == [2.0, -2.0, 0.75]
    assert g.sh[0, 2, 1:].tolist() == [-0.75, 0.375, -0.375]
    assert g.sh[2, 2, 1:].tolist() == [7.0, 8.0, 9.0]
    assert g.opacities.tolist() == [-1.5, 4.0, 0.0]
    assert g.scales[1].tolist() == [-1.0, -1.0, -1.0]
    assert g.rotations[1].tolist() == [0.5, 0.5, 0.5, 0.5]
    assert g.rotations[2].tolist() == [0.0, float(f32(0.6)), 0.0, float(f32(0.8))]


def test_golden_rewrite_is_byte_identical(tmp_path):
    out = tmp_path / "again.ply"
    write_splat_ply(read_splat_ply(GOLDEN), out)
    assert out.read_bytes() == GOLDEN.read_bytes()


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_roundtrip_each_degree(tmp_path, rng, degree):
    m = random_map(50, rng, degree=degree)
    m = m.replace(**{f: getattr(m, f).astype(f32).astype(np.float64) for f in ("positions", "scales", "sh", "opacities")})
    q = m.rotations.astype(f32).astype(np.float64)
    m = m.replace(rotations=q)
    p = tmp_path / "m.ply"
    write_splat_ply(m, p)
    back = read_splat_ply(p)
    assert back.sh_degree == degree
    assert back.values_equal(m)


def _write_ply(path, props, rows, fmt="binary_little_endian"):
    head = ["ply", f"format {fmt} 1.0", f"element vertex {len(rows)}"]
    head += [f"property float {n}" for n in props] + ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode())
        if fmt == "ascii":
            fh.write("".join(" ".join(repr(v) for v in r) + "\n" for r in rows).encode())
        else:
            e = "<" if fmt == "binary_little_endian" else ">"
            for r in rows:
                fh.write(struct.pack(e + "f" * len(r), *r))


DEG0 = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
        "rot_0", "rot_1", "rot_2", "rot_3"]


@pytest.mark.parametrize("fmt", ["ascii", "binary_big_endian"])
def test_other_encodings(tmp_path, fmt):
    p = tmp_path / "a.ply"
    _write_ply(p, DEG0, [[1, 2, 3, 0.5, 0.5, 0.5, 0, -1, -1, -1, 1, 0, 0, 0]], fmt)
    g = read_splat_ply(p)
    assert g.sh_degree == 0 and g.positions.tolist() == [[1, 2, 3]]


def test_unnormalized_quaternion_is_normalized(tmp_path):
    p = tmp_path / "q.ply"
    _write_ply(p, DEG0, [[0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0]])
    assert read_splat_ply(p).rotations.tolist() == [[1.0, 0.0, 0.0, 0.0]]


def test_missing_property_named(tmp_path):
    p = tmp_path / "bad.ply"
    _write_ply(p, [n for n in DEG0 if n != "scale_1"], [[0] * 13])
    with pytest.raises(PlyFormatError, match="missing property scale_1"):
        read_splat_ply(p)


def test_bad_rest_count_and_truncation(tmp_path):
    p = tmp_path / "bad.ply"
    _write_ply(p, DEG0 + ["f_rest_0", "f_rest_1"], [[0] * 16])
    with pytest.raises(PlyFormatError, match="f_rest"):
        read_splat_ply(p)
    raw = GOLDEN.read_bytes()
    (tmp_path / "cut.ply").write_bytes(raw[:-10])
    with pytest.raises(PlyFormatError, match="truncated"):
        read_splat_ply(tmp_path / "cut.ply")
    (tmp_path / "not.ply").write_bytes(b"hello")
    with pytest.raises(PlyFormatError):
        read_splat_ply(tmp_path / "not.ply")


def test_empty_map(tmp_path):
    p = tmp_path / "e.ply"
    _write_ply(p, DEG0, [])
    with pytest.raises(EmptyMapError):
        read_splat_ply(p)
    assert len(read_splat_ply(p, allow_empty=True)) == 0


def test_point_cloud_ply_and_xyz(tmp_path, rng):
    pts = rng.normal(size=(20, 3))
    write_point_cloud(pts, tmp_path / "c.ply")
    assert np.array_equal(read_point_cloud(tmp_path / "c.ply").points, pts)
    write_point_cloud(pts, tmp_path / "c.xyz")
    assert np.array_equal(read_point_cloud(tmp_path / "c.xyz").points, pts)


def test_xyz_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("# comment\n1 2 3\n4 five 6\n")
    with pytest.raises(SplatError, match=":3:"):
        read_point_cloud(p)
    p.write_text("1 2\n")
    with pytest.raises(SplatError, match=":1:"):
        read_point_cloud(p)


def test_poses_roundtrip_and_errors(tmp_path):
    poses = [PoseRecord("a", RigidTransform.from_rotvec([0, 0, 0.3], [1, 0, 0])), PoseRecord("b", RigidTransform.identity())]
    p = tmp_path / "poses.jsonl"
    write_poses(poses, p)
    back = read_poses(p)
    assert list(back) == ["a", "b"]
    assert np.allclose(back["a"].transform.matrix(), poses[0].transform.matrix(), atol=0)
    p.write_text(p.read_text() + json.dumps({"scan_id": "c", "matrix": [1, 2]}) + "\n")
    with pytest.raises(SplatError, match=":3:"):
        read_poses(p)


def test_assemble_applies_poses_in_order():
    a = PointCloud([[1.0, 0, 0]])
    b = PointCloud([[0.0, 0, 0], [0, 1, 0]])
    pa = PoseRecord("a", RigidTransform(np.eye(3), [0, 0, 5]))
    pb = PoseRecord("b", RigidTransform.from_rotvec([0, 0, np.pi / 2], [1, 1, 1]))
    out = assemble_submap([(a, pa), (b, pb)]).points
    assert np.allclose(out, [[1, 0, 5], [1, 1, 1], [0, 1, 1]], atol=1e-12)
    with pytest.raises(SplatError):
        assemble_submap([])


def test_voxel_downsample_keeps_first_per_voxel():
    pts = PointCloud([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [1.5, 0, 0], [0.05, 0, 0]])
    assert voxel_downsample(pts, 1.0).points.tolist() == [[0.1, 0.1, 0.1], [1.5, 0, 0]]
    with pytest.raises(SplatError):
        voxel_downsample(pts, 0)


def test_empty_map_writes_header_only(tmp_path):
    from splatdiff.model import GaussianMap

    p = tmp_path / "e.ply"
    write_splat_ply(GaussianMap.empty(3), p)
    raw = p.read_bytes()
    assert b"element vertex 0\n" in raw and raw.endswith(b"end_header\n")


def test_point_cloud_extra_properties_ignored(tmp_path):
    p = tmp_path / "i.ply"
    _write_ply(p, ["x", "y", "z", "intensity"], [[1, 2, 3, 200], [4, 5, 6, 7]])
    assert read_point_cloud(p).points.tolist() == [[1, 2, 3], [4, 5, 6]]


def test_xyz_nan_row(tmp_path):
    p = tmp_path / "n.xyz"
    p.write_text("0 0 0\n1 2 nan\n")
    with pytest.raises(SplatError, match=":2:"):
        read_point_cloud(p)


def test_assembled_segments_invert_to_originals(rng):
    from conftest import random_rotation

    scans = []
    for i in range(3):
        pose = PoseRecord(str(i), RigidTransform.from_rotvec(random_rotation(rng), rng.uniform(-50, 50, 3)))
        scans.append((PointCloud(rng.uniform(-30, 30, (10_000, 3))), pose))
    out = assemble_submap(scans).points
    for i, (cloud, pose) in enumerate(scans):
        seg = out[i * 10_000:(i + 1) * 10_000]
        assert np.max(np.abs(pose.transform.inverse().apply(seg) - cloud.points)) < 1e-9
