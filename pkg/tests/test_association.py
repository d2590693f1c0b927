"""Tests for scoring, data association, pruning and merging."""

import itertools
import json
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from geofusion.association import (
    SCORE_CONFIDENCE,
    AssocConfig,
    AssociationTrace,
    ScoreConfig,
    TrackedObject,
    associate_frame,
    classify_points,
    false_positive_score,
    geometric_consistency_score,
    measurement_score,
    merge_overlapping,
    obb_collision_ratio,
    prune_false_positives,
)
from geofusion.const import DEFAULT_EPS_FP
from geofusion.exceptions import ConfigError, EmptyRender, InvalidTrack
from geofusion.geometry import Pose, make_model, relative
from geofusion.scene_sim import CameraFrame, SemanticMeasurement, orbit_trajectory, render_depth, render_model

CONFIDENCE_ONLY = AssocConfig(score_source=SCORE_CONFIDENCE)
NARROW_SCORE = ScoreConfig(eps_res=0.005, eps_out=0.015, slope=12.0, midpoint=0.5)


@pytest.fixture
def blank_frame(small_intrinsics):
    depth = np.zeros((small_intrinsics.height, small_intrinsics.width), dtype=np.float32)
    return CameraFrame(0, Pose.identity(), small_intrinsics, depth)


@pytest.fixture
def cube():
    return make_model(99, "cube", "box", (0.1, 0.1, 0.1))


@pytest.fixture
def box_view(registry, small_intrinsics):
    """A cracker box alone, its large face toward the camera one meter away."""
    truth = Pose.from_rotvec([0.5 * math.pi, 0.0, 0.0], [0.0, 0.0, 1.0])
    model = registry[1]
    depth = render_model(model.surface_points, truth, small_intrinsics, model.spacing)
    return CameraFrame(0, Pose.identity(), small_intrinsics, depth), truth


def _meas(t, pose, class_id=1, confidence=0.9):
    return SemanticMeasurement(t, class_id, pose, confidence)


def _tracked(object_id, best, n, pose=None, class_id=1):
    obj = TrackedObject(object_id, class_id, pose or Pose.identity())
    for t in range(n):
        obj.add_measurement(t, 0, best, obj.pose)
    return obj


@pytest.mark.parametrize(
    "kwargs", [{"eps_fp": 1.5}, {"eps_new": -1.0}, {"score_source": "magic"}, {"meas_noise": np.eye(3)}]
)
def test_assoc_config_validation(kwargs):
    with pytest.raises(ConfigError):
        AssocConfig(**kwargs)


def test_score_config_validation():
    with pytest.raises(ConfigError):
        ScoreConfig(eps_res=0.02, eps_out=0.01)


def test_gaussian_density_peaks_at_zero():
    cfg = AssocConfig()
    peak = cfg.gaussian_density(np.zeros(6))
    assert peak > cfg.eps_new
    assert cfg.gaussian_density(np.array([0, 0, 0, 0.01, 0, 0])) == pytest.approx(peak * math.exp(-0.5))


def test_classify_points_ratios(blank_frame, small_intrinsics):
    blank_frame.depth[:] = 1.0
    rendered = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.1], [0.0, 0.0, 0.9], [10.0, 0.0, 1.0]])
    r_in, r_out, r_occ = classify_points(rendered, blank_frame, ScoreConfig())
    assert (r_in, r_out, r_occ) == pytest.approx((0.25, 0.5, 0.25))


def test_classify_points_needs_points(blank_frame):
    with pytest.raises(EmptyRender):
        classify_points(np.zeros((0, 3)), blank_frame, ScoreConfig())


def test_geometric_score_prefers_true_pose(box_scene, registry, small_intrinsics):
    camera = orbit_trajectory(1)[0]
    frame = render_depth(box_scene, camera, small_intrinsics, registry)
    truth = relative(camera, box_scene.objects[0].pose)
    shifted = Pose(truth.q, truth.t + np.array([0.1, 0.0, 0.0]))
    good = geometric_consistency_score(_meas(0, truth), registry[1], frame, NARROW_SCORE)
    bad = geometric_consistency_score(_meas(0, shifted), registry[1], frame, NARROW_SCORE)
    assert good > 0.9
    assert bad < 0.5


def _new_track(score, pose):
    obj = TrackedObject(1, 1, pose)
    obj.add_measurement(0, 0, score, pose)
    return obj


def test_perfect_fit_score_closed_form(box_view, registry):
    frame, truth = box_view
    score = geometric_consistency_score(_meas(0, truth), registry[1], frame, NARROW_SCORE)
    assert score == pytest.approx((1.0 / (1.0 + math.exp(-6.0))) ** 3, rel=1e-9)
    assert score == pytest.approx(0.99260, abs=1e-5)


def test_fully_occluded_score_closed_form(box_view, registry):
    frame, truth = box_view
    wall = CameraFrame(0, Pose.identity(), frame.intrinsics, np.full_like(frame.depth, 0.5))
    score = geometric_consistency_score(_meas(0, truth), registry[1], wall, NARROW_SCORE)
    s0, s1 = 1.0 / (1.0 + math.exp(6.0)), 1.0 / (1.0 + math.exp(-6.0))
    assert score == pytest.approx(s0 * s1 * s0, rel=1e-9)
    assert score == pytest.approx(6.1e-6, rel=0.01)


def test_typical_noisy_detection_survives_creation(box_view, registry):
    """A detection off by one noise sigma in depth and yaw still clears pruning at n=1."""
    frame, truth = box_view
    tilted = Pose.from_rotvec([0.0, 0.0873, 0.0]).compose(Pose(truth.q))
    noisy = Pose(tilted.q, truth.t + np.array([0.0, 0.0, -0.01]))
    score = geometric_consistency_score(_meas(0, noisy), registry[1], frame, ScoreConfig())
    assert false_positive_score(_new_track(score, noisy)) <= DEFAULT_EPS_FP
    # the same detection fails the narrow tolerances
    narrow = geometric_consistency_score(_meas(0, noisy), registry[1], frame, NARROW_SCORE)
    assert false_positive_score(_new_track(narrow, noisy)) > DEFAULT_EPS_FP


@pytest.mark.parametrize(
    "offset",
    [
        pytest.param([0.1, 0.0, 0.0], id="beside"),
        pytest.param([0.0, 0.0, 0.05], id="behind"),
        pytest.param([0.0, 0.0, -0.1], id="floating"),
    ],
)
def test_inconsistent_detection_is_pruned_at_creation(box_view, registry, offset):
    frame, truth = box_view
    wrong = Pose(truth.q, truth.t + np.array(offset))
    score = geometric_consistency_score(_meas(0, wrong), registry[1], frame, ScoreConfig())
    assert false_positive_score(_new_track(score, wrong)) > DEFAULT_EPS_FP


def test_geometric_association_on_rendered_frame(box_view, registry):
    frame, truth = box_view
    cfg = AssocConfig()
    objects = []
    stray = Pose(truth.q, truth.t + np.array([0.3, 0.0, 0.0]))
    zs = [_meas(0, truth), _meas(0, stray)]
    first = associate_frame(zs, objects, Pose.identity(), registry, frame, ScoreConfig(), cfg)
    assert [(a.object_id, a.created) for a in first] == [(1, True), (2, True)]
    assert first[0].score > 0.99
    assert first[1].score < 0.01

    survivors, victims = prune_false_positives(objects, cfg)
    assert [o.id for o in survivors] == [1]
    assert [o.id for o in victims] == [2]

    nudged = Pose(truth.q, truth.t + np.array([0.002, 0.0, 0.0]))
    second = associate_frame([_meas(1, nudged)], survivors, Pose.identity(), registry, frame, ScoreConfig(), cfg)
    assert (second[0].object_id, second[0].created) == (1, False)
    assert second[0].likelihood > cfg.eps_new
    assert survivors[0].n_meas == 2


def test_measurement_behind_camera_scores_zero(blank_frame, registry):
    z = _meas(0, Pose(t=[0.0, 0.0, -1.0]))
    assert measurement_score(z, registry, blank_frame, ScoreConfig(), AssocConfig()) == 0.0


def test_confidence_source_uses_detector_confidence(blank_frame, registry):
    z = _meas(0, Pose(t=[0.0, 0.0, 1.0]), confidence=0.7)
    assert measurement_score(z, registry, blank_frame, ScoreConfig(), CONFIDENCE_ONLY) == 0.7


def test_first_measurement_creates_object(blank_frame, registry):
    objects = []
    assignments = associate_frame(
        [_meas(0, Pose(t=[0, 0, 1]))], objects, Pose.identity(), registry, blank_frame, ScoreConfig(), CONFIDENCE_ONLY
    )
    assert [a.created for a in assignments] == [True]
    assert [o.id for o in objects] == [1]
    assert objects[0].pose.is_close(Pose(t=[0, 0, 1]), 1e-12)


def test_repeated_measurement_updates_object(blank_frame, registry):
    objects = [_tracked(1, 0.9, 1, Pose(t=[0.0, 0.0, 1.0]))]
    z = _meas(1, Pose(t=[0.0, 0.0, 1.002]))
    assignments = associate_frame([z], objects, Pose.identity(), registry, blank_frame, ScoreConfig(), CONFIDENCE_ONLY)
    assert not assignments[0].created
    assert assignments[0].object_id == 1
    assert objects[0].n_meas == 2


def test_one_measurement_per_object_per_frame(blank_frame, registry):
    objects = [_tracked(1, 0.9, 1, Pose(t=[0.0, 0.0, 1.0]))]
    zs = [_meas(1, Pose(t=[0.0, 0.0, 1.0])), _meas(1, Pose(t=[0.0, 0.0, 1.001]))]
    assignments = associate_frame(zs, objects, Pose.identity(), registry, blank_frame, ScoreConfig(), CONFIDENCE_ONLY)
    assert [(a.object_id, a.created) for a in assignments] == [(1, False), (2, True)]
    assert objects[0].n_meas == 2


def test_class_mismatch_and_distance_start_new_objects(blank_frame, registry):
    objects = [_tracked(1, 0.9, 1, Pose(t=[0.0, 0.0, 1.0]))]
    zs = [_meas(1, Pose(t=[0.0, 0.0, 1.0]), class_id=2), _meas(1, Pose(t=[1.0, 0.0, 1.0]))]
    assignments = associate_frame(
        zs, objects, Pose.identity(), registry, blank_frame, ScoreConfig(), CONFIDENCE_ONLY, ids=itertools.count(10)
    )
    assert [(a.object_id, a.created) for a in assignments] == [(10, True), (11, True)]
    assert assignments[0].likelihood == 0.0


def test_association_trace_records_decisions(tmp_path, blank_frame, registry):
    trace = AssociationTrace()
    objects = [_tracked(1, 0.9, 1, Pose(t=[0.0, 0.0, 1.0]))]
    zs = [_meas(1, Pose(t=[0.0, 0.0, 1.0])), _meas(1, Pose(t=[0.5, 0.0, 1.0]))]
    associate_frame(zs, objects, Pose.identity(), registry, blank_frame, ScoreConfig(), CONFIDENCE_ONLY, trace=trace)
    trace.write(tmp_path / "trace.jsonl")
    records = [json.loads(line) for line in (tmp_path / "trace.jsonl").read_text().splitlines()]
    assert [r["decision"] for r in records] == [1, "new"]
    assert set(records[0]["likelihoods"]) == {"1"}


def test_false_positive_score():
    assert false_positive_score(_tracked(1, 1.0, 1)) == pytest.approx(1.0 - 1.0 / (1.0 + math.exp(-1.0)))
    # more support never raises the score
    assert false_positive_score(_tracked(1, 0.8, 5)) < false_positive_score(_tracked(1, 0.8, 1))
    with pytest.raises(InvalidTrack):
        false_positive_score(TrackedObject(1, 1, Pose.identity()))


def test_prune_false_positives():
    good, bad = _tracked(1, 1.0, 1), _tracked(2, 0.2, 1)
    survivors, victims = prune_false_positives([good, bad], AssocConfig())
    assert survivors == [good]
    assert victims == [bad]


def test_collision_ratio_basic_cases(cube):
    assert obb_collision_ratio(cube, Pose.identity(), cube, Pose.identity()) == pytest.approx(1.0)
    assert obb_collision_ratio(cube, Pose.identity(), cube, Pose(t=[0.05, 0.0, 0.0])) == pytest.approx(0.5)
    assert obb_collision_ratio(cube, Pose.identity(), cube, Pose(t=[0.2, 0.0, 0.0])) == 0.0


def _random_pose(rng):
    x, y, z, w = Rotation.random(random_state=int(rng.integers(1 << 30))).as_quat()
    return Pose([w, x, y, z], rng.uniform(-0.15, 0.15, size=3))


def test_collision_ratio_agrees_with_surface_sampling(cube):
    slab = make_model(97, "slab", "box", (0.16, 0.06, 0.21))
    rng = np.random.default_rng(5)
    spacing = max(cube.spacing, slab.spacing)
    overlapping = separated = 0
    for _ in range(1000):
        pose_a, pose_b = _random_pose(rng), _random_pose(rng)
        depth = min(
            slab.signed_distance(relative(pose_b, pose_a).transform_points(cube.surface_points)).min(),
            cube.signed_distance(relative(pose_a, pose_b).transform_points(slab.surface_points)).min(),
        )
        ratio = obb_collision_ratio(cube, pose_a, slab, pose_b)
        assert obb_collision_ratio(slab, pose_b, cube, pose_a) == pytest.approx(ratio, abs=1e-12)
        # within one sample spacing of touching the sampled answer is ambiguous
        if depth < -spacing:
            assert ratio > 0.0
            overlapping += 1
        elif depth > spacing:
            assert ratio == 0.0
            separated += 1
    assert overlapping > 100
    assert separated > 100


def test_merge_keeps_more_reliable_object(registry):
    strong = _tracked(1, 0.9, 2, Pose(t=[0.0, 0.0, 0.1]))
    weak = _tracked(2, 0.5, 1, Pose(t=[0.001, 0.0, 0.1]))
    far = _tracked(3, 0.5, 1, Pose(t=[0.5, 0.0, 0.1]))
    alive = merge_overlapping([weak, far, strong], registry, AssocConfig())
    assert [o.id for o in alive] == [1, 3]
    assert strong.n_meas == 3
