import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatdiff.detection import DetectionParams, detect_changes, detect_disappearing, detect_emerging
from splatdiff.model import GaussianMap, PointCloud, RigidTransform, SplatError
from splatdiff.spatial import KdIndex
from splatdiff.synth import ScenePairSpec, gen_scene_pair

from conftest import random_map


def mean_dist_oracle(queries, db, h):
    d = np.linalg.norm(queries[:, None, :] - db[None, :, :], axis=2)
    return np.sort(d, axis=1)[:, : min(h, len(db))].mean(axis=1)


def test_identical_scenes_have_no_changes(rng):
    m = random_map(300, rng, spread=1.0)
    rep = detect_changes(m, PointCloud(m.positions))
    assert len(rep.ep_indices) == 0 and len(rep.dp_indices) == 0


def test_isolated_point_is_emerging_and_missing_one_disappearing():
    grid = np.stack(np.meshgrid(*[np.arange(0, 3, 0.25)] * 2, indexing="ij"), -1).reshape(-1, 2)
    base = np.column_stack([grid, np.zeros(len(grid))])
    sub = np.vstack([base, [[1.0, 1.0, 5.0]]])
    old = np.vstack([base, [[1.0, 1.0, -5.0]]])
    ep, _ = detect_emerging(sub, old, DetectionParams())
    dp, _ = detect_disappearing(old, sub, DetectionParams())
    assert ep.tolist() == [len(base)] and dp.tolist() == [len(base)]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 15), st.floats(0.1, 3.0))
def test_flags_match_brute_oracle(seed, h, r):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 5, (rng.integers(1, 60), 3))
    b = rng.uniform(0, 5, (rng.integers(1, 60), 3))
    idx, mean = detect_emerging(a, b, DetectionParams(h=h, r=r))
    want = mean_dist_oracle(a, b, h)
    assert np.allclose(mean, want, atol=1e-12)
    assert idx.tolist() == np.flatnonzero(mean >= r).tolist()


def test_threshold_is_inclusive():
    db = np.zeros((1, 3))
    q = np.array([[1.0, 0, 0]])
    assert detect_emerging(q, db, DetectionParams(h=1, r=1.0))[0].tolist() == [0]


def test_h_larger_than_database_is_reported():
    m = GaussianMap(np.zeros((2, 3)), np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)), np.zeros((2, 3, 16)), np.zeros(2))
    rep = detect_changes(m, PointCloud(np.zeros((5, 3))))
    assert rep.params["h_effective_ep"] == 2 and rep.params["h_effective_dp"] == 5


def test_transform_moves_map_into_submap_frame(rng):
    m = random_map(200, rng, spread=1.0)
    t = RigidTransform.from_rotvec([0.2, 0.1, -0.3], [5, 5, 5])
    rep = detect_changes(m, PointCloud(t.apply(m.positions)), t)
    assert len(rep.ep_indices) == 0 and len(rep.dp_indices) == 0


def test_prebuilt_index_reused(rng):
    m = random_map(100, rng)
    sub = PointCloud(m.positions + 0.01)
    a = detect_changes(m, sub)
    b = detect_changes(m, sub, submap_index=KdIndex(sub.points))
    assert np.array_equal(a.dp_mean_dist, b.dp_mean_dist)


def test_empty_inputs_and_bad_params(rng):
    m = random_map(10, rng)
    with pytest.raises(SplatError, match="submap"):
        detect_changes(m, PointCloud(np.zeros((0, 3))))
    with pytest.raises(SplatError):
        DetectionParams(h=0)
    with pytest.raises(SplatError):
        DetectionParams(r=0)


def test_synthetic_pair_exact():
    pair = gen_scene_pair(ScenePairSpec(seed=11))
    rep = detect_changes(pair.old_map, pair.submap)
    assert rep.ep_indices.tolist() == pair.truth.ep.tolist()
    assert rep.dp_indices.tolist() == pair.truth.dp.tolist()


def test_removed_object_flagged_dense_structure_not():
    pair = gen_scene_pair(ScenePairSpec(seed=12, n_added=0, n_removed=1))
    _, mean = detect_disappearing(pair.old_map.positions, pair.submap)
    assert np.all(mean[pair.truth.map_removed] >= 1.0)
    assert np.all(mean[~pair.truth.map_removed] < 1.0)


def test_report_invariant_under_prerotated_submap():
    off = RigidTransform.from_rotvec([0.1, -0.2, 0.3], [4.0, -2.0, 1.0])
    base = ScenePairSpec(seed=13)
    a = gen_scene_pair(base)
    b = gen_scene_pair(base.with_(frame_offset=off))
    ra = detect_changes(a.old_map, a.submap)
    rb = detect_changes(b.old_map, b.submap, off)
    assert ra.ep_indices.tolist() == rb.ep_indices.tolist()
    assert ra.dp_indices.tolist() == rb.dp_indices.tolist()
