import json

import numpy as np
import pytest

from splatdiff.model import ChangeReport, RigidTransform
from splatdiff.synth import (
    ScenePairSpec,
    SpecError,
    TruthLabels,
    bench_report,
    box_sample_count,
    eval_detection,
    gen_scene_pair,
    load_specs,
)


def test_deterministic_in_seed():
    a = gen_scene_pair(ScenePairSpec(seed=9))
    b = gen_scene_pair(ScenePairSpec(seed=9))
    c = gen_scene_pair(ScenePairSpec(seed=10))
    assert a.old_map.values_equal(b.old_map)
    assert np.array_equal(a.submap.points, b.submap.points)
    assert not np.array_equal(a.submap.points[:10], c.submap.points[:10])


def test_truth_labels_cover_changed_boxes():
    spec = ScenePairSpec(seed=1)
    pair = gen_scene_pair(spec)
    n_added = sum(box_sample_count(b, spec.object_density) for b in pair.boxes["added"])
    n_removed = sum(box_sample_count(b, spec.object_density) for b in pair.boxes["removed"])
    assert len(pair.truth.ep) == n_added and len(pair.truth.dp) == n_removed
    # changed boxes float clear of the ground
    assert np.all(pair.submap.points[pair.truth.ep, 2] >= spec.change_clearance)


def test_frame_offset_applied():
    off = RigidTransform.from_rotvec([0, 0, 0.2], [1, 2, 0])
    base = gen_scene_pair(ScenePairSpec(seed=3))
    moved = gen_scene_pair(ScenePairSpec(seed=3, frame_offset=off))
    assert np.allclose(moved.submap.points, off.apply(base.submap.points))
    assert moved.transform is off


def test_spec_validation_paths():
    with pytest.raises(SpecError, match=r"^\$\.ground_density"):
        ScenePairSpec.from_dict({"ground_density": 0})
    with pytest.raises(SpecError, match=r"^\$\.pairs\[1\]\.n_added"):
        load_specs({"pairs": [{}, {"n_added": "two"}]})
    with pytest.raises(SpecError, match="unknown field"):
        ScenePairSpec.from_dict({"colour": 1})
    with pytest.raises(SpecError, match="cannot place"):
        gen_scene_pair(ScenePairSpec(extent=5, n_static_objects=30))


def test_spec_dict_roundtrip():
    s = ScenePairSpec(seed=4, frame_offset=RigidTransform.from_rotvec([0.1, 0, 0], [0, 1, 0]))
    again = ScenePairSpec.from_dict(json.loads(json.dumps(s.to_dict())))
    assert again.to_dict() == s.to_dict()


def test_load_specs_seed_and_repeat():
    specs = load_specs({"seed": 5}, repeat=3)
    assert [s.seed for s in specs] == [5, 6, 7]
    specs = load_specs([{}, {"n_added": 1}], base_seed=10)
    assert [s.seed for s in specs] == [10, 10]


def test_eval_detection_conventions():
    truth = TruthLabels(np.array([True, False, True]), np.array([False, False]))
    rep = ChangeReport([0], [], [9, 0, 9], [0, 0], {})
    s = eval_detection(rep, truth).scores()
    assert s == {"ep_precision": 1.0, "ep_recall": 0.5, "dp_precision": 1.0, "dp_recall": 1.0}
    rep = ChangeReport([0, 1], [1], [9, 9, 0], [0, 9], {})
    s = eval_detection(rep, truth).scores()
    assert s["ep_precision"] == 0.5 and s["dp_precision"] == 0.0


def test_bench_report_rows_and_failures():
    specs = [ScenePairSpec(seed=0), ScenePairSpec(seed=1, extent=5, n_static_objects=30)]
    rep = bench_report(specs)
    assert [r["status"] for r in rep.rows] == ["ok", "failed"]
    assert rep.aggregate["n_failed"] == 1 and rep.aggregate["count_identity"]
    assert "FAILED" in rep.to_table()
    doc = json.loads(rep.to_json(timings=False))
    assert "timings" not in doc["aggregate"] and "timings" not in doc["pairs"][0]
    with pytest.raises(SpecError):
        bench_report([])


def test_static_pair_has_no_labels_and_no_report():
    from splatdiff.update import update_pipeline

    pair = gen_scene_pair(ScenePairSpec(seed=2, n_added=0, n_removed=0))
    assert not pair.truth.submap_added.any() and not pair.truth.map_removed.any()
    res = update_pipeline(pair.old_map, pair.submap)
    assert len(res.report.ep_indices) == 0 and len(res.report.dp_indices) == 0


def test_aggregate_is_row_mean_and_noise_sweep():
    specs = [ScenePairSpec(seed=s, extent=20, n_static_objects=3) for s in range(4)]
    rep = bench_report(specs)
    for k in ("ep_precision", "ep_recall", "dp_precision", "dp_recall", "carried_fraction"):
        assert abs(rep.aggregate[k] - np.mean([r[k] for r in rep.rows])) <= 1e-12
    means = []
    for sigma in (0.0, 0.02, 0.05):
        agg = bench_report([s.with_(sensor_noise_sigma=sigma) for s in specs]).aggregate
        means.append(np.mean([agg[k] for k in ("ep_precision", "ep_recall", "dp_precision", "dp_recall")]))
    assert means[0] >= means[1] - 1e-12 and means[1] >= means[2] - 1e-12
