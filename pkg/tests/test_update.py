import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatdiff.model import GaussianMap, PointCloud, RigidTransform, SplatError, logit, sigmoid
from splatdiff.registration import IcpParams
from splatdiff.sh import eval_sh
from splatdiff.synth import ScenePairSpec, gen_scene_pair
from splatdiff.update import (
    Features,
    NoDonorError,
    PipelineError,
    UpdateParams,
    assign_features,
    merge_prior,
    remove_disappearing,
    transform_map,
    update_pipeline,
)

from conftest import random_map, random_rotation


def test_transform_map_moves_and_rotates(rng):
    m = random_map(40, rng)
    t = RigidTransform.from_rotvec([0.3, -1.2, 0.5], [1, 2, 3])
    out = transform_map(m, t, "new")
    assert out.frame_label == "new"
    assert np.allclose(out.positions, t.apply(m.positions))
    assert np.array_equal(out.scales, m.scales) and np.array_equal(out.opacities, m.opacities)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    # colour seen along R d after the move equals colour along d before it
    assert np.allclose(eval_sh(out.sh, t.rotation @ d), eval_sh(m.sh, d), atol=1e-12)


def test_transform_map_translation_only_is_exact(rng):
    m = random_map(10, rng)
    out = transform_map(m, RigidTransform(np.eye(3), [1, 0, 0]))
    assert np.array_equal(out.sh, m.sh) and np.array_equal(out.rotations, m.rotations)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_transform_map_inverse_roundtrip(seed):
    rng = np.random.default_rng(seed)
    m = random_map(20, rng)
    t = RigidTransform.from_rotvec(random_rotation(rng), rng.normal(size=3))
    back = transform_map(transform_map(m, t), t.inverse())
    assert np.allclose(back.positions, m.positions, atol=1e-10)
    assert np.allclose(back.sh, m.sh, atol=1e-10)
    dots = np.abs(np.sum(back.rotations * m.rotations, axis=1))
    assert np.allclose(dots, 1.0, atol=1e-10)


def test_remove_keeps_order_and_origin(rng):
    m = random_map(6, rng)
    out = remove_disappearing(m, [4, 1])
    assert out.origin.tolist() == [0, 2, 3, 5]
    with pytest.raises(SplatError):
        remove_disappearing(m, [6])


def test_assign_single_donor_copies_verbatim(rng):
    donors = random_map(30, rng)
    pts = donors.positions[[3, 8]] + 1e-3
    out = assign_features(pts, donors, UpdateParams(e=1))
    assert np.array_equal(out.positions, pts)
    assert np.array_equal(out.sh, donors.sh[[3, 8]])
    assert np.array_equal(out.rotations, donors.rotations[[3, 8]])
    assert out.origin.tolist() == [-1, -1]


def test_assign_means_in_activated_space():
    q = np.array([[1.0, 0, 0, 0], [-1.0, 0, 0, 0]])  # same orientation, opposite sign
    donors = GaussianMap(
        [[0, 0, 0], [0.1, 0, 0]], np.log([[1, 1, 1], [3, 3, 3]]), q,
        np.stack([np.zeros((3, 1)), np.ones((3, 1))]), logit(np.array([0.2, 0.6])), sh_degree=0,
    )
    out = assign_features([[0.05, 0, 0]], donors, UpdateParams(e=2))
    assert np.allclose(np.exp(out.scales), 2.0)
    assert np.allclose(sigmoid(out.opacities), 0.4)
    assert np.allclose(out.sh, 0.5)
    assert np.allclose(np.abs(out.rotations), [[1, 0, 0, 0]])


def test_assign_fallback_and_no_donor():
    empty = GaussianMap.empty(0)
    with pytest.raises(NoDonorError):
        assign_features([[0.0, 0, 0]], empty)
    fb = Features(np.zeros(3), np.array([1.0, 0, 0, 0]), np.zeros(3), 0.0)
    out = assign_features([[0.0, 0, 0], [1, 1, 1]], empty, UpdateParams(fallback_features=fb))
    assert len(out) == 2 and out.sh.shape == (2, 3, 1)
    assert len(assign_features(np.zeros((0, 3)), empty)) == 0


def test_merge_prior_layout(rng):
    kept = random_map(5, rng).subset(np.array([0, 2, 4]))
    em = assign_features(rng.normal(size=(2, 3)), kept)
    out = merge_prior(kept, em)
    assert out.origin.tolist() == [0, 2, 4, -1, -1]
    with pytest.raises(SplatError):
        merge_prior(kept, assign_features([[0.0, 0, 0]], random_map(3, rng, degree=1)))


def test_pipeline_identical_scene_keeps_count():
    pair = gen_scene_pair(ScenePairSpec(seed=2, n_added=0, n_removed=0))
    res = update_pipeline(pair.old_map, PointCloud(pair.old_map.positions))
    assert len(res.prior) == len(pair.old_map)
    assert res.carried_fraction == 1.0


def test_pipeline_count_identity_and_provenance():
    pair = gen_scene_pair(ScenePairSpec(seed=5))
    res = update_pipeline(pair.old_map, pair.submap)
    m, ep, dp = len(pair.old_map), len(res.report.ep_indices), len(res.report.dp_indices)
    assert len(res.prior) == m - dp + ep
    prov = json.loads(res.provenance_json())
    assert len(prov["carried"]) + prov["emerging"] == len(res.prior)
    assert sorted(set(range(m)) - set(prov["carried"])) == res.report.dp_indices.tolist()
    assert set(res.timings) == {"register", "transform", "detect", "remove", "assign", "merge"}


def test_pipeline_errors_name_stage(rng):
    m = random_map(20, rng)
    with pytest.raises(PipelineError, match=r"^\[register\]") as ei:
        update_pipeline(m, PointCloud(np.zeros((0, 3))))
    assert ei.value.stage == "register"
    with pytest.raises(PipelineError, match=r"^\[register\]"):
        update_pipeline(m, PointCloud(m.positions + 1e3), IcpParams())


def test_assign_two_donor_opacity_hand_value():
    donors = GaussianMap(
        [[0, 0, 0], [1, 0, 0]], np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)),
        np.zeros((2, 3, 16)), logit(np.array([0.2, 0.8])),
    )
    out = assign_features([[0.5, 0, 0]], donors, UpdateParams(e=2))
    assert sigmoid(out.opacities[0]) == pytest.approx(0.5, abs=1e-15)


def test_assign_matches_brute_force_mean(rng):
    donors = random_map(200, rng)
    pts = rng.uniform(-10, 10, (25, 3))
    out = assign_features(pts, donors, UpdateParams(e=5))
    for i, p in enumerate(pts):
        d2 = ((donors.positions - p) ** 2).sum(1)
        nn = np.lexsort((np.arange(len(d2)), d2))[:5]
        assert np.allclose(out.sh[i], donors.sh[nn].mean(0), atol=1e-12, rtol=0)
        assert np.allclose(np.exp(out.scales[i]), np.exp(donors.scales[nn]).mean(0), atol=1e-12, rtol=0)
        assert sigmoid(out.opacities[i]) == pytest.approx(sigmoid(donors.opacities[nn]).mean(), abs=1e-12)
        q = donors.rotations[nn] * np.sign(donors.rotations[nn] @ donors.rotations[nn[0]])[:, None]
        qm = q.mean(0)
        assert np.allclose(out.rotations[i], qm / np.linalg.norm(qm), atol=1e-12)


def test_remove_all_and_none(rng):
    m = random_map(4, rng)
    assert len(remove_disappearing(m, np.arange(4))) == 0
    assert remove_disappearing(m, []).values_equal(m)


def test_merge_into_empty_kept(rng):
    donors = random_map(10, rng)
    em = assign_features(rng.normal(size=(5, 3)), donors)
    out = merge_prior(donors.subset(np.zeros(10, bool)), em)
    assert len(out) == 5 and np.all(out.origin == -1)


def test_identity_transform_keeps_values(rng):
    m = random_map(10, rng)
    assert transform_map(m, RigidTransform.identity()).values_equal(m)


def test_pipeline_equivariant_under_offset():
    base = ScenePairSpec(seed=8, extent=20, n_static_objects=8)
    off = RigidTransform.from_rotvec(np.radians([2.0, -3.0, 5.0]), [0.5, -0.4, 0.2])
    a = gen_scene_pair(base)
    b = gen_scene_pair(base.with_(frame_offset=off))
    ra = update_pipeline(a.old_map, a.submap)
    rb = update_pipeline(b.old_map, b.submap)
    assert ra.report.dp_indices.tolist() == rb.report.dp_indices.tolist()
    assert ra.report.ep_indices.tolist() == rb.report.ep_indices.tolist()
    assert np.allclose(off.apply(ra.prior.positions), rb.prior.positions, atol=0.05)
