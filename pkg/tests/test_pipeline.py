"""End-to-end tests of the mapping coordinator."""

import csv
import json

import numpy as np
import pytest

from geofusion.const import RELATION_P2P, TABLE_ID, VARIANT_BSLAM, VARIANT_FBF, VARIANT_GEOFUSION, VARIANT_RFRONT
from geofusion.coordinator import (
    TIMING_FIELDS,
    MappingCoordinator,
    PipelineConfig,
    read_snapshots,
    run_pipeline,
)
from geofusion.evaluation import contact_violation_stats
from geofusion.exceptions import ConfigError
from geofusion.geometry import Pose


@pytest.fixture
def geofusion_run(noiseless_dataset):
    coordinator = MappingCoordinator(noiseless_dataset, PipelineConfig(VARIANT_GEOFUSION))
    coordinator.run()
    return coordinator


def test_unknown_variant_is_rejected():
    with pytest.raises(ConfigError):
        PipelineConfig("orb-slam")


def test_geofusion_recovers_ground_truth(geofusion_run, noiseless_dataset):
    final = geofusion_run.snapshots[-1]
    anchor = noiseless_dataset.anchor
    assert len(geofusion_run.snapshots) == len(noiseless_dataset.frames)
    assert [(e.id, e.class_id) for e in final.objects] == [(1, 1)]
    assert anchor.compose(final.objects[0].pose).is_close(noiseless_dataset.scene.objects[0].pose, 1e-6)
    for t, pose in enumerate(noiseless_dataset.trajectory):
        assert anchor.compose(geofusion_run.robot[t]).is_close(pose, 1e-6)


def test_map_frame_is_the_first_camera(geofusion_run, noiseless_dataset):
    assert geofusion_run.robot[0].is_close(Pose.identity(), 1e-6)
    table = geofusion_run.table
    camera_height = noiseless_dataset.anchor.t[2]
    assert table.normal @ (np.zeros(3) - table.center) == pytest.approx(camera_height)
    assert geofusion_run.relation_config.gravity == pytest.approx(tuple(-table.normal))


def test_geofusion_keeps_table_contact(geofusion_run):
    relations = geofusion_run.snapshots[-1].relations
    assert [(r.kind, r.obj_a, r.obj_b) for r in relations] == [(RELATION_P2P, TABLE_ID, 1)]
    report = geofusion_run.relation_report()
    assert report[0]["residuals"] == pytest.approx([0.0, 0.0], abs=1e-6)


def test_geofusion_scores_follow_false_positive_score(geofusion_run):
    for snapshot in geofusion_run.snapshots:
        for entry in snapshot.objects:
            assert entry.score == pytest.approx(1.0 - entry.f_j)
            assert entry.f_j <= 0.4


def test_stage_two_closes_a_floating_gap(geofusion_run, noiseless_dataset):
    obj = geofusion_run.objects[0]
    registry, table = noiseless_dataset.registry, geofusion_run.table
    obj.stage1_pose = Pose(obj.stage1_pose.q, obj.stage1_pose.t + 0.005 * table.normal)
    geofusion_run.relations = geofusion_run.infer()
    assert len(geofusion_run.relations) == 1
    obj.pose = obj.stage1_pose
    _, gap_before = contact_violation_stats(geofusion_run.objects, geofusion_run.relations, registry, table)
    geofusion_run.run_stage2()
    _, gap_after = contact_violation_stats(geofusion_run.objects, geofusion_run.relations, registry, table)
    assert gap_before == pytest.approx(0.005, abs=1e-9)
    assert gap_after < 1e-3


def test_noisy_run_tracks_every_object(noisy_dataset):
    coordinator = MappingCoordinator(noisy_dataset, PipelineConfig(VARIANT_GEOFUSION))
    coordinator.run()
    final = coordinator.snapshots[-1]
    anchor = noisy_dataset.anchor
    assert 0 < len(final.objects) <= len(noisy_dataset.scene.objects)
    for truth in noisy_dataset.scene.objects:
        offsets = [
            np.linalg.norm(anchor.compose(entry.pose).t - truth.pose.t)
            for entry in final.objects
            if entry.class_id == truth.class_id
        ]
        assert offsets and min(offsets) < 0.03


def test_spurious_detections_leave_no_tracks(cluttered_dataset):
    spurious = sum(1 for ms in cluttered_dataset.measurements for m in ms if m.source_object < 0)
    assert spurious > 0
    coordinator = MappingCoordinator(cluttered_dataset, PipelineConfig(VARIANT_GEOFUSION))
    coordinator.run()
    for obj in coordinator.objects:
        sources = {cluttered_dataset.measurements[t][k].source_object for t, k in obj.measurement_log}
        assert any(source >= 0 for source in sources)


def test_frame_by_frame_publishes_raw_measurements(noiseless_dataset):
    snapshots = run_pipeline(noiseless_dataset, PipelineConfig(VARIANT_FBF))
    for snapshot, measurements in zip(snapshots, noiseless_dataset.measurements):
        assert [e.id for e in snapshot.objects] == list(range(1, len(measurements) + 1))
        for entry, z in zip(snapshot.objects, measurements):
            assert entry.score == pytest.approx(z.confidence)
        assert snapshot.relations == []
        assert snapshot.timing.total_ms == 0.0


def test_frontend_only_never_optimizes(noiseless_dataset):
    snapshots = run_pipeline(noiseless_dataset, PipelineConfig(VARIANT_RFRONT))
    assert all(s.timing.stage1_ms == 0.0 and s.timing.stage2_ms == 0.0 for s in snapshots)
    final = snapshots[-1]
    world = noiseless_dataset.anchor.compose(final.objects[0].pose)
    assert world.is_close(noiseless_dataset.scene.objects[0].pose, 1e-9)
    assert final.relations == []


def test_baseline_slam_optimizes_without_relations(noiseless_dataset):
    coordinator = MappingCoordinator(noiseless_dataset, PipelineConfig(VARIANT_BSLAM))
    snapshots = coordinator.run()
    assert not coordinator.association.merge
    assert snapshots[-1].timing.stage1_ms > 0.0
    assert all(s.timing.relations_ms == 0.0 and s.relations == [] for s in snapshots)


def test_frames_must_arrive_in_order(noiseless_dataset):
    coordinator = MappingCoordinator(noiseless_dataset, PipelineConfig())
    coordinator.process_frame(0)
    with pytest.raises(ConfigError):
        coordinator.process_frame(2)


def test_run_outputs(tmp_path, noiseless_dataset):
    snapshots = run_pipeline(noiseless_dataset, PipelineConfig(), tmp_path / "run")
    run_dir = tmp_path / "run"
    assert sorted(p.name for p in (run_dir / "maps").iterdir()) == [f"{t:04d}.json" for t in range(6)]

    with open(run_dir / "timings.csv", newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert tuple(rows[0]) == TIMING_FIELDS
    assert len(rows) == 6

    trace = (run_dir / "trace.jsonl").read_text().splitlines()
    assert len(trace) == sum(len(m) for m in noiseless_dataset.measurements)
    summary = json.loads((run_dir / "run.json").read_text())
    assert summary["variant"] == VARIANT_GEOFUSION
    assert summary["objects"] == 1

    loaded = read_snapshots(run_dir)
    assert len(loaded) == len(snapshots)
    assert loaded[-1].objects[0].pose.is_close(snapshots[-1].objects[0].pose, 1e-12)
    assert loaded[-1].relations == snapshots[-1].relations


def test_read_snapshots_needs_maps(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_snapshots(tmp_path)
