"""Measurement-to-object association, false-positive pruning and overlap merging."""

from __future__ import annotations

from dataclasses import dataclass, field
import itertools
import json
import logging
import math
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence

import numpy as np

from .const import (
    DEFAULT_EPS_FP,
    DEFAULT_EPS_NEW,
    DEFAULT_EPS_OUT,
    DEFAULT_EPS_RES,
    DEFAULT_MEAS_SIGMA_ROT,
    DEFAULT_MEAS_SIGMA_TRANS,
    DEFAULT_MERGE_COLLISION_THRESHOLD,
    DEFAULT_SIGMOID_MIDPOINT,
    DEFAULT_SIGMOID_SLOPE,
    NEW_OBJECT,
)
from .exceptions import ConfigError, EmptyRender, InvalidTrack
from .factors import diagonal_covariance, measurement_residual
from .geometry import ModelRegistry, ObjectModel, Pose
from .scene_sim import CameraFrame, SemanticMeasurement, back_project_depth, render_model

_LOGGER = logging.getLogger(__name__)

SCORE_GEOMETRIC = "geometric"
SCORE_CONFIDENCE = "confidence"


@dataclass(frozen=True)
class ScoreConfig:
    """Thresholds and sigmoid shape of the geometric consistency score."""

    eps_res: float = DEFAULT_EPS_RES
    eps_out: float = DEFAULT_EPS_OUT
    slope: float = DEFAULT_SIGMOID_SLOPE
    midpoint: float = DEFAULT_SIGMOID_MIDPOINT

    def __post_init__(self) -> None:
        if not 0.0 < self.eps_res <= self.eps_out:
            raise ConfigError("Need 0 < eps_res <= eps_out")
        if self.slope <= 0.0:
            raise ConfigError("Sigmoid slope must be > 0")

    def sigmoid(self, u: float) -> float:
        return 1.0 / (1.0 + math.exp(-self.slope * (u - self.midpoint)))


@dataclass(frozen=True, eq=False)
class AssocConfig:
    """Association thresholds and the measurement noise used by the likelihood."""

    eps_new: float = DEFAULT_EPS_NEW
    eps_fp: float = DEFAULT_EPS_FP
    meas_noise: np.ndarray = field(
        default_factory=lambda: diagonal_covariance(DEFAULT_MEAS_SIGMA_ROT, DEFAULT_MEAS_SIGMA_TRANS)
    )
    merge_collision_threshold: float = DEFAULT_MERGE_COLLISION_THRESHOLD
    score_source: str = SCORE_GEOMETRIC
    merge: bool = True

    def __post_init__(self) -> None:
        """Validate ranges and precompute the Gaussian normalizer."""
        if self.eps_new < 0.0:
            raise ConfigError("eps_new must be >= 0")
        if not 0.0 <= self.eps_fp <= 1.0:
            raise ConfigError("eps_fp must be in [0, 1]")
        if not 0.0 <= self.merge_collision_threshold <= 1.0:
            raise ConfigError("merge_collision_threshold must be in [0, 1]")
        if self.score_source not in (SCORE_GEOMETRIC, SCORE_CONFIDENCE):
            raise ConfigError(f"Unknown score source '{self.score_source}'")
        q = np.asarray(self.meas_noise, dtype=float)
        if q.shape != (6, 6) or not np.allclose(q, q.T):
            raise ConfigError("meas_noise must be a symmetric 6x6 matrix")
        try:
            np.linalg.cholesky(q)
        except np.linalg.LinAlgError as err:
            raise ConfigError("meas_noise must be positive definite") from err
        object.__setattr__(self, "meas_noise", q)
        object.__setattr__(self, "_info", np.linalg.inv(q))
        object.__setattr__(self, "_norm", 1.0 / math.sqrt((2.0 * math.pi) ** 6 * np.linalg.det(q)))

    def gaussian_density(self, residual: np.ndarray) -> float:
        return float(self._norm * math.exp(-0.5 * float(residual @ self._info @ residual)))


@dataclass
class TrackedObject:
    """A map object with its association history.

    `pose` is the published estimate; `stage1_pose` keeps the last Stage I
    estimate that Stage II priors are built from.
    """

    id: int
    class_id: int
    pose: Pose
    best_gc_score: float = 0.0
    measurement_log: list[tuple[int, int]] = field(default_factory=list)
    log_scores: list[float] = field(default_factory=list)
    stage1_pose: Optional[Pose] = None
    best_measurement_pose: Optional[Pose] = None

    @property
    def n_meas(self) -> int:
        return len(self.measurement_log)

    def add_measurement(self, t: int, index: int, score: float, world_pose: Pose) -> None:
        self.measurement_log.append((t, index))
        self.log_scores.append(score)
        if score > self.best_gc_score or self.best_measurement_pose is None:
            self.best_gc_score = max(self.best_gc_score, score)
            self.best_measurement_pose = world_pose

    def absorb(self, other: TrackedObject) -> None:
        """Take over another object's measurements."""
        self.measurement_log.extend(other.measurement_log)
        self.log_scores.extend(other.log_scores)
        if other.best_gc_score > self.best_gc_score:
            self.best_gc_score = other.best_gc_score
            self.best_measurement_pose = other.best_measurement_pose

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "class_id": self.class_id,
            "pose": self.pose.to_dict(),
            "n_meas": self.n_meas,
            "best_gc_score": self.best_gc_score,
            "f_j": false_positive_score(self) if self.n_meas else 1.0,
        }


@dataclass(frozen=True)
class Assignment:
    """Decision for one measurement."""

    measurement_index: int
    object_id: int
    created: bool
    likelihood: float
    score: float


# === Geometric consistency ===


def classify_points(
    rendered: np.ndarray, frame: CameraFrame, cfg: ScoreConfig
) -> tuple[float, float, float]:
    """Inlier, outlier and occlusion ratios of rendered camera-frame points against the observed depth."""
    rendered = np.atleast_2d(np.asarray(rendered, dtype=float))
    total = len(rendered) if rendered.size else 0
    if total == 0:
        raise EmptyRender("No rendered points to classify")
    intr = frame.intrinsics
    u, v, z = intr.project(rendered)
    with np.errstate(invalid="ignore"):
        ui = np.rint(u)
        vi = np.rint(v)
    on_image = (z > 0.0) & (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    observed = np.zeros(total)
    observed[on_image] = frame.depth[vi[on_image].astype(np.int64), ui[on_image].astype(np.int64)]
    has_return = on_image & (observed > 0.0)
    diff = observed - z
    occluded = has_return & (diff < -cfg.eps_res)
    inlier = has_return & (np.abs(diff) <= cfg.eps_res)
    n_occ = int(occluded.sum())
    n_in = int(inlier.sum())
    n_out = total - n_in - n_occ
    return n_in / total, n_out / total, n_occ / total


def render_hypothesis(model: ObjectModel, pose_cam: Pose, frame: CameraFrame) -> np.ndarray:
    """Visible surface of a model placed at a camera-frame pose, as back-projected points."""
    depth = render_model(model.surface_points, pose_cam, frame.intrinsics, model.spacing)
    points = back_project_depth(depth, frame.intrinsics)
    if len(points) == 0:
        raise EmptyRender(f"Model {model.name} renders no pixels at {pose_cam!r}")
    return points


def geometric_consistency_score(
    z: SemanticMeasurement, model: ObjectModel, frame: CameraFrame, cfg: ScoreConfig
) -> float:
    """S(r_in) * S(1 - r_out) * S(1 - r_occ) of the hypothesis rendered at z."""
    r_in, r_out, r_occ = classify_points(render_hypothesis(model, z.pose, frame), frame, cfg)
    return cfg.sigmoid(r_in) * cfg.sigmoid(1.0 - r_out) * cfg.sigmoid(1.0 - r_occ)


def measurement_score(
    z: SemanticMeasurement,
    registry: ModelRegistry,
    frame: CameraFrame,
    score_cfg: ScoreConfig,
    assoc_cfg: AssocConfig,
) -> float:
    """The per-measurement score that feeds the likelihood and R_j."""
    if assoc_cfg.score_source == SCORE_CONFIDENCE:
        return float(z.confidence)
    if z.class_id not in registry:
        return 0.0
    try:
        return geometric_consistency_score(z, registry[z.class_id], frame, score_cfg)
    except EmptyRender as err:
        _LOGGER.debug("Scoring measurement of class %d at t=%d: %s", z.class_id, z.t, err)
        return 0.0


def association_likelihood(
    z: SemanticMeasurement,
    obj: TrackedObject,
    x_t: Pose,
    registry: ModelRegistry,
    frame: CameraFrame,
    score_cfg: ScoreConfig,
    assoc_cfg: AssocConfig,
    score: Optional[float] = None,
) -> float:
    """Unnormalized class-indicator * score * Gaussian density of the measurement residual."""
    if z.class_id != obj.class_id:
        return 0.0
    if score is None:
        score = measurement_score(z, registry, frame, score_cfg, assoc_cfg)
    symmetry = registry[obj.class_id].symmetry_axis if obj.class_id in registry else None
    residual = measurement_residual(x_t, obj.pose, z.pose, symmetry)
    return score * assoc_cfg.gaussian_density(residual)


def _id_source(objects: Sequence[TrackedObject]) -> Iterator[int]:
    return itertools.count(max((o.id for o in objects), default=0) + 1)


def associate_frame(
    measurements: Sequence[SemanticMeasurement],
    objects: list[TrackedObject],
    x_t: Pose,
    registry: ModelRegistry,
    frame: CameraFrame,
    score_cfg: ScoreConfig,
    assoc_cfg: AssocConfig,
    ids: Optional[Iterator[int]] = None,
    trace: Optional[AssociationTrace] = None,
) -> list[Assignment]:
    """Assign each measurement, in order, to its most likely object or to a new one.

    At most one measurement per frame updates an object: when the best
    candidate was already claimed this frame, the measurement starts a new
    object. Ties go to the lowest object id. New objects are appended to
    `objects`.
    """
    ids = ids if ids is not None else _id_source(objects)
    claimed: set[int] = set()
    assignments: list[Assignment] = []

    for k, z in enumerate(measurements):
        score = measurement_score(z, registry, frame, score_cfg, assoc_cfg)
        likelihoods: dict[int, float] = {}
        best_id, best = NEW_OBJECT, 0.0
        for obj in sorted(objects, key=lambda o: o.id):
            p = association_likelihood(z, obj, x_t, registry, frame, score_cfg, assoc_cfg, score)
            likelihoods[obj.id] = p
            if p > best:
                best_id, best = obj.id, p

        world_pose = x_t.compose(z.pose)
        if best > assoc_cfg.eps_new and best_id not in claimed:
            target = next(o for o in objects if o.id == best_id)
            target.add_measurement(z.t, k, score, world_pose)
            assignment = Assignment(k, best_id, False, best, score)
        else:
            if best > assoc_cfg.eps_new:
                _LOGGER.debug("t=%d measurement %d: object %d already claimed, starting a new one", z.t, k, best_id)
            new = TrackedObject(next(ids), z.class_id, world_pose)
            new.stage1_pose = world_pose
            new.add_measurement(z.t, k, score, world_pose)
            objects.append(new)
            assignment = Assignment(k, new.id, True, best, score)
        claimed.add(assignment.object_id)
        assignments.append(assignment)
        if trace is not None:
            trace.record(z.t, assignment, likelihoods)
    return assignments


# === False positives ===


def false_positive_score(obj: TrackedObject) -> float:
    """f_j = 1 - R_j / (1 + exp(-n_j))."""
    if obj.n_meas == 0:
        raise InvalidTrack(f"Object {obj.id} has no measurements")
    return 1.0 - obj.best_gc_score / (1.0 + math.exp(-obj.n_meas))


def prune_false_positives(
    objects: Sequence[TrackedObject], cfg: AssocConfig
) -> tuple[list[TrackedObject], list[TrackedObject]]:
    """Split objects into survivors (f_j <= eps_fp) and victims."""
    survivors, victims = [], []
    for obj in objects:
        (victims if false_positive_score(obj) > cfg.eps_fp else survivors).append(obj)
    if victims:
        _LOGGER.debug("Pruned %d false positives: %s", len(victims), [o.id for o in victims])
    return survivors, victims


# === Overlap merging ===


def _interval_overlap(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Overlap length and the shorter extent of two projected point sets."""
    lo = max(a.min(), b.min())
    hi = min(a.max(), b.max())
    shorter = min(a.max() - a.min(), b.max() - b.min())
    return hi - lo, shorter


def obb_collision_ratio(model_a: ObjectModel, pose_a: Pose, model_b: ObjectModel, pose_b: Pose) -> float:
    """Minimum per-axis overlap fraction of two oriented boxes over their face axes.

    Zero as soon as any separating axis exists, including the edge-edge axes.
    The edge-edge axes only ever force that zero; the ratio itself comes from
    the face axes alone.
    """
    corners_a = pose_a.transform_points(model_a.obb_corners())
    corners_b = pose_b.transform_points(model_b.obb_corners())
    face_axes = np.vstack((pose_a.rotation.T, pose_b.rotation.T))

    ratio = 1.0
    for axis in face_axes:
        overlap, shorter = _interval_overlap(corners_a @ axis, corners_b @ axis)
        if overlap <= 0.0:
            return 0.0
        ratio = min(ratio, overlap / shorter if shorter > 0.0 else 1.0)

    for axis_a, axis_b in itertools.product(pose_a.rotation.T, pose_b.rotation.T):
        axis = np.cross(axis_a, axis_b)
        norm = np.linalg.norm(axis)
        if norm < 1e-9:
            continue
        overlap, _ = _interval_overlap(corners_a @ (axis / norm), corners_b @ (axis / norm))
        if overlap <= 0.0:
            return 0.0
    return float(min(ratio, 1.0))


def merge_overlapping(
    objects: Sequence[TrackedObject], registry: ModelRegistry, cfg: AssocConfig
) -> list[TrackedObject]:
    """Merge every pair whose collision ratio exceeds the threshold.

    The object with the higher false-positive score is absorbed into the other.
    """
    alive = sorted(objects, key=lambda o: o.id)
    merged = True
    while merged:
        merged = False
        for a, b in itertools.combinations(alive, 2):
            ratio = obb_collision_ratio(registry[a.class_id], a.pose, registry[b.class_id], b.pose)
            if ratio <= cfg.merge_collision_threshold:
                continue
            f_a, f_b = false_positive_score(a), false_positive_score(b)
            survivor, victim = (a, b) if f_a <= f_b else (b, a)
            survivor.absorb(victim)
            alive.remove(victim)
            _LOGGER.debug("Merged object %d into %d (collision ratio %.2f)", victim.id, survivor.id, ratio)
            merged = True
            break
    return alive


# === Audit trace ===


class AssociationTrace:
    """Collects one JSON record per association decision."""

    def __init__(self) -> None:
        self.records: list[dict[str, Any]] = []

    def record(self, t: int, assignment: Assignment, likelihoods: dict[int, float]) -> None:
        self.records.append(
            {
                "t": t,
                "measurement": assignment.measurement_index,
                "decision": "new" if assignment.created else assignment.object_id,
                "object_id": assignment.object_id,
                "score": assignment.score,
                "likelihoods": {str(k): v for k, v in sorted(likelihoods.items())},
            }
        )

    def lines(self) -> Iterator[str]:
        for record in self.records:
            yield json.dumps(record, sort_keys=True)

    def write(self, path: Path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines()), encoding="utf-8")
