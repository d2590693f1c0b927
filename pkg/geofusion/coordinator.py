"""Mapping coordinator: drives association and the two optimization stages over a sequence."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
import itertools
import json
import logging
from pathlib import Path
import time
from typing import Any, Optional

from .association import (
    SCORE_CONFIDENCE,
    AssocConfig,
    AssociationTrace,
    ScoreConfig,
    TrackedObject,
    associate_frame,
    false_positive_score,
    merge_overlapping,
    prune_false_positives,
)
from .const import (
    DOMAIN,
    RELATION_C2C,
    TABLE_ID,
    VARIANT_BSLAM,
    VARIANT_FBF,
    VARIANT_GEOFUSION,
    VARIANT_RFRONT,
    VARIANTS,
)
from .exceptions import ConfigError, DegenerateAxes, NotConverged, SingularSystem
from .factors import (
    ContactFactor,
    MeasurementFactor,
    OdometryFactor,
    PriorFactor,
    diagonal_covariance,
    whitening,
)
from .geometry import PlaneFeature, Pose
from .optimizer import FactorGraph, SolverConfig, object_key, robot_key, solve
from .relations import ContactRelation, RelationConfig, infer_relations, relation_residuals
from .scene_sim import SimulatedDataset

_LOGGER = logging.getLogger(__name__)

TIMING_FIELDS = ("frame", "assoc_ms", "stage1_ms", "relations_ms", "stage2_ms")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a pipeline run needs besides the dataset."""

    variant: str = VARIANT_GEOFUSION
    score: ScoreConfig = field(default_factory=ScoreConfig)
    association: AssocConfig = field(default_factory=AssocConfig)
    relations: RelationConfig = field(default_factory=RelationConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown variant '{self.variant}', expected one of {VARIANTS}")


@dataclass
class FrameTiming:
    """Wall-clock cost of each phase for one keyframe, in milliseconds."""

    frame: int
    assoc_ms: float = 0.0
    stage1_ms: float = 0.0
    relations_ms: float = 0.0
    stage2_ms: float = 0.0

    @property
    def total_ms(self) -> float:
        return self.assoc_ms + self.stage1_ms + self.relations_ms + self.stage2_ms

    def as_row(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in TIMING_FIELDS}


@dataclass(frozen=True)
class MapEntry:
    """One published map object."""

    id: int
    class_id: int
    pose: Pose
    score: float
    f_j: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "class": self.class_id,
            "pose": self.pose.to_dict(),
            "score": self.score,
            "f_j": self.f_j,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MapEntry:
        return cls(
            int(data["id"]),
            int(data["class"]),
            Pose.from_dict(data["pose"]),
            float(data["score"]),
            float(data["f_j"]),
        )


@dataclass
class MapSnapshot:
    """The map as published after one keyframe."""

    t: int
    camera: Pose
    objects: list[MapEntry]
    relations: list[ContactRelation]
    cost: Optional[float]
    timing: FrameTiming

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "camera": self.camera.to_dict(),
            "objects": [entry.to_dict() for entry in self.objects],
            "relations": [relation.to_dict() for relation in self.relations],
            "cost": self.cost,
            "timings_ms": {k: v for k, v in self.timing.as_row().items() if k != "frame"},
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MapSnapshot:
        timings = data.get("timings_ms", {})
        return cls(
            int(data["t"]),
            Pose.from_dict(data["camera"]),
            [MapEntry.from_dict(o) for o in data["objects"]],
            [ContactRelation.from_dict(r) for r in data.get("relations", [])],
            data.get("cost"),
            FrameTiming(int(data["t"]), **{k: float(v) for k, v in timings.items()}),
        )


def _ms(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


class MappingCoordinator:
    """Owns one map: robot estimates, tracked objects, relations and timings."""

    def __init__(self, dataset: SimulatedDataset, config: PipelineConfig) -> None:
        """Initialize the coordinator."""
        self.dataset = dataset
        self.registry = dataset.registry
        self.config = config
        self.variant = config.variant

        association = config.association
        if self.variant == VARIANT_BSLAM:
            association = replace(association, score_source=SCORE_CONFIDENCE, merge=False)
        self.association = association

        solver = config.solver
        self._w_odom = whitening(solver.q_odom)
        self._w_meas = whitening(solver.r_meas)
        self._w_gauge = whitening(diagonal_covariance(solver.gauge_sigma, solver.gauge_sigma))
        self._w_prior = whitening(diagonal_covariance(*solver.prior_sigma))

        self.robot: list[Pose] = []
        self.objects: list[TrackedObject] = []
        self.relations: list[ContactRelation] = []
        self.snapshots: list[MapSnapshot] = []
        self.trace = AssociationTrace()
        self.last_cost: Optional[float] = None
        self._ids = itertools.count(1)

        self.table: Optional[PlaneFeature] = None
        self.relation_config = config.relations
        if self.uses_relations:
            self._locate_table()

    def _locate_table(self) -> None:
        """Table and gravity in the map frame, which is the first camera's frame."""
        if not self.dataset.trajectory:
            return
        self.table = self.dataset.table_observation
        self.relation_config = replace(self.config.relations, gravity=tuple(-self.table.normal))
        _LOGGER.debug("Table plane at %s, normal %s", self.table.center.round(3), self.table.normal.round(3))

    @property
    def tracks(self) -> bool:
        return self.variant != VARIANT_FBF

    @property
    def optimizes(self) -> bool:
        return self.variant in (VARIANT_GEOFUSION, VARIANT_BSLAM)

    @property
    def uses_relations(self) -> bool:
        return self.variant == VARIANT_GEOFUSION

    @property
    def map_info(self) -> dict[str, Any]:
        return {
            "variant": self.variant,
            "frames": len(self.robot),
            "objects": len(self.objects),
            "relations": len(self.relations),
        }

    # === Per-frame processing ===

    def _predict_robot(self, t: int) -> Pose:
        if t == 0:
            return Pose.identity()
        return self.robot[t - 1].compose(self.dataset.odometry[t - 1])

    def _is_last(self, t: int) -> bool:
        return t == len(self.dataset.measurements) - 1

    def process_frame(self, t: int) -> MapSnapshot:
        """Ingest keyframe t and publish the resulting map."""
        if t != len(self.robot):
            raise ConfigError(f"Frames must be processed in order; expected {len(self.robot)}, got {t}")
        timing = FrameTiming(t)
        self.robot.append(self._predict_robot(t))
        measurements = self.dataset.measurements[t]

        if not self.tracks:
            x_t = self.robot[t]
            entries = [
                MapEntry(k + 1, z.class_id, x_t.compose(z.pose), z.confidence, 1.0 - z.confidence)
                for k, z in enumerate(measurements)
            ]
            return self._publish(MapSnapshot(t, x_t, entries, [], None, timing))

        start = time.perf_counter()
        if measurements:
            frame = self.dataset.frames[t]
            associate_frame(
                measurements,
                self.objects,
                self.robot[t],
                self.registry,
                frame,
                self.config.score,
                self.association,
                self._ids,
                self.trace,
            )
        # unreliable candidates go first so their logs never reach a merge survivor
        self.objects, _ = prune_false_positives(self.objects, self.association)
        if self.association.merge:
            self.objects = merge_overlapping(self.objects, self.registry, self.association)
            self.objects, _ = prune_false_positives(self.objects, self.association)
        if self.variant == VARIANT_RFRONT:
            for obj in self.objects:
                obj.pose = obj.best_measurement_pose
        timing.assoc_ms = _ms(start)

        solver = self.config.solver
        if self.optimizes and ((t + 1) % solver.stage1_every == 0 or self._is_last(t)):
            start = time.perf_counter()
            self.run_stage1(t)
            timing.stage1_ms = _ms(start)

        if self.uses_relations and ((t + 1) % solver.stage2_every == 0 or self._is_last(t)):
            start = time.perf_counter()
            self.relations = self.infer(use_stage1=True)
            timing.relations_ms = _ms(start)
            start = time.perf_counter()
            self.run_stage2()
            timing.stage2_ms = _ms(start)

        entries = [
            MapEntry(obj.id, obj.class_id, obj.pose, 1.0 - false_positive_score(obj), false_positive_score(obj))
            for obj in sorted(self.objects, key=lambda o: o.id)
        ]
        return self._publish(MapSnapshot(t, self.robot[t], entries, list(self.relations), self.last_cost, timing))

    def _publish(self, snapshot: MapSnapshot) -> MapSnapshot:
        self.snapshots.append(snapshot)
        _LOGGER.debug(
            "t=%d: %d objects, %d relations, %.1f ms",
            snapshot.t,
            len(snapshot.objects),
            len(snapshot.relations),
            snapshot.timing.total_ms,
        )
        return snapshot

    # === Stage I ===

    def build_stage1_graph(self, t: int) -> FactorGraph:
        """Robot poses 0..t and all object poses, tied by odometry and measurements."""
        graph = FactorGraph()
        for i in range(t + 1):
            graph.add_variable(robot_key(i), self.robot[i])
        graph.add_factor(PriorFactor(robot_key(0), Pose.identity(), self._w_gauge))
        for i in range(1, t + 1):
            graph.add_factor(OdometryFactor(robot_key(i - 1), robot_key(i), self.dataset.odometry[i - 1], self._w_odom))
        for obj in self.objects:
            graph.add_variable(object_key(obj.id), obj.pose)
            symmetry = self.registry[obj.class_id].symmetry_axis
            for ti, k in obj.measurement_log:
                if ti > t:
                    continue
                z = self.dataset.measurements[ti][k]
                graph.add_factor(MeasurementFactor(robot_key(ti), object_key(obj.id), z.pose, self._w_meas, symmetry))
        return graph

    def _solve(self, graph: FactorGraph, stage: str):
        try:
            return solve(graph, self.config.solver)
        except NotConverged as err:
            _LOGGER.warning("%s did not converge: %s", stage, err)
            return err.result
        except (SingularSystem, DegenerateAxes) as err:
            _LOGGER.error("%s failed, keeping previous estimates: %s", stage, err)
            return None

    def run_stage1(self, t: int) -> None:
        result = self._solve(self.build_stage1_graph(t), "Stage I")
        if result is None:
            return
        for i in range(t + 1):
            self.robot[i] = result.values[robot_key(i)]
        for obj in self.objects:
            obj.pose = result.values[object_key(obj.id)]
            obj.stage1_pose = obj.pose
        self.last_cost = result.cost
        _LOGGER.debug(
            "Stage I at t=%d: cost %.6g -> %.6g in %d iterations",
            t,
            result.initial_cost,
            result.cost,
            result.iterations,
        )

    # === Relations and Stage II ===

    def infer(self, use_stage1: bool = True) -> list[ContactRelation]:
        """Contact relations among the current objects and the table."""
        views = [
            TrackedObject(o.id, o.class_id, o.stage1_pose if use_stage1 and o.stage1_pose is not None else o.pose)
            for o in self.objects
        ]
        return infer_relations(views, self.table, self.registry, self.relation_config)

    def build_stage2_graph(self) -> FactorGraph:
        """Object poses only, held near Stage I by priors and pulled into contact."""
        solver = self.config.solver
        graph = FactorGraph()
        by_id = {o.id: o for o in self.objects}
        for obj in self.objects:
            anchor = obj.stage1_pose if obj.stage1_pose is not None else obj.pose
            graph.add_variable(object_key(obj.id), anchor)
            graph.add_factor(PriorFactor(object_key(obj.id), anchor, self._w_prior))
        table = self.table
        for relation in self.relations:
            sides = []
            for obj_id, feat in ((relation.obj_a, relation.feat_a), (relation.obj_b, relation.feat_b)):
                if obj_id == TABLE_ID:
                    sides.append((None, table))
                else:
                    sides.append((object_key(obj_id), self.registry.features(by_id[obj_id].class_id)[feat]))
            factor = ContactFactor(
                relation.kind, sides[0][0], sides[0][1], sides[1][0], sides[1][1], solver.omega_p, solver.omega_q
            )
            if relation.kind == RELATION_C2C:
                try:
                    factor.freeze_sign(graph.values)
                except DegenerateAxes:
                    continue
            graph.add_factor(factor)
        return graph

    def run_stage2(self) -> None:
        if not self.objects:
            return
        result = self._solve(self.build_stage2_graph(), "Stage II")
        if result is None:
            return
        for obj in self.objects:
            obj.pose = result.values[object_key(obj.id)]

    def relation_report(self) -> list[dict[str, Any]]:
        """Relations with their signed residuals at the published poses."""
        poses = {o.id: o.pose for o in self.objects}
        classes = {o.id: o.class_id for o in self.objects}
        table = self.table
        report = []
        for relation in self.relations:
            residuals = relation_residuals(relation, poses, classes, self.registry, table)
            report.append(replace(relation, residuals=tuple(float(r) for r in residuals)).to_dict())
        return report

    # === Whole run ===

    def run(self) -> list[MapSnapshot]:
        for t in range(len(self.dataset.measurements)):
            self.process_frame(t)
        _LOGGER.info(
            "%s run finished: %d frames, %d objects, %d relations",
            self.variant,
            len(self.robot),
            len(self.snapshots[-1].objects) if self.snapshots else 0,
            len(self.relations),
        )
        return self.snapshots


# === Export ===


def write_run(coordinator: MappingCoordinator, out_dir: Path) -> Path:
    """Write per-keyframe maps, the timing log and the association trace."""
    out_dir = Path(out_dir)
    maps_dir = out_dir / "maps"
    maps_dir.mkdir(parents=True, exist_ok=True)
    for snapshot in coordinator.snapshots:
        (maps_dir / f"{snapshot.t:04d}.json").write_text(
            json.dumps(snapshot.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    write_timings([s.timing for s in coordinator.snapshots], out_dir / "timings.csv")
    coordinator.trace.write(out_dir / "trace.jsonl")
    summary = {
        "schema": f"{DOMAIN}-run/1",
        **coordinator.map_info,
        "relations": coordinator.relation_report() if coordinator.uses_relations else [],
    }
    (out_dir / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _LOGGER.info("Wrote %d map snapshots to %s", len(coordinator.snapshots), out_dir)
    return out_dir


def write_timings(timings: list[FrameTiming], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=TIMING_FIELDS)
        writer.writeheader()
        for timing in timings:
            writer.writerow({k: (f"{v:.3f}" if isinstance(v, float) else v) for k, v in timing.as_row().items()})


def read_snapshots(run_dir: Path) -> list[MapSnapshot]:
    """Load the per-keyframe maps written by write_run."""
    maps_dir = Path(run_dir) / "maps"
    if not maps_dir.is_dir():
        raise FileNotFoundError(f"No maps directory in {run_dir}")
    return [
        MapSnapshot.from_dict(json.loads(path.read_text(encoding="utf-8")))
        for path in sorted(maps_dir.glob("*.json"))
    ]


def run_pipeline(
    dataset: SimulatedDataset, config: PipelineConfig, out_dir: Optional[Path] = None
) -> list[MapSnapshot]:
    """Run one variant over the whole dataset; optionally write its outputs."""
    coordinator = MappingCoordinator(dataset, config)
    snapshots = coordinator.run()
    if out_dir is not None:
        write_run(coordinator, out_dir)
    return snapshots
