"""Synthetic clutter scenes, depth rendering and noisy measurement emission."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import math
from typing import Any, Sequence

import numpy as np

from .const import (
    DEFAULT_CLASS_CONFUSION_RATE,
    DEFAULT_CONFIDENCE_RANGE,
    DEFAULT_CONTACT_TOLERANCE,
    DEFAULT_CX,
    DEFAULT_CY,
    DEFAULT_FALSE_POSITIVE_RATE,
    DEFAULT_FP_OFFSET,
    DEFAULT_FX,
    DEFAULT_FY,
    DEFAULT_GRAVITY,
    DEFAULT_HEIGHT,
    DEFAULT_MEAS_SIGMA_ROT,
    DEFAULT_MEAS_SIGMA_TRANS,
    DEFAULT_MIN_VISIBLE_PIXELS,
    DEFAULT_MISS_RATE,
    DEFAULT_ODOM_SIGMA_ROT,
    DEFAULT_ODOM_SIGMA_TRANS,
    DEFAULT_ORBIT_HEIGHT,
    DEFAULT_ORBIT_RADIUS,
    DEFAULT_ORBIT_SWEEP,
    DEFAULT_PLACEMENT_ATTEMPTS,
    DEFAULT_PLACEMENT_CLEARANCE,
    DEFAULT_SAMPLE_SPACING,
    DEFAULT_TABLE_EXTENTS,
    DEFAULT_WIDTH,
    RELATION_P2C,
    RELATION_P2P,
    TABLE_ID,
)
from .exceptions import ConfigError, PlacementFailure
from .geometry import (
    BOX_BOTTOM_FACE,
    BOX_TOP_FACE,
    CYLINDER_BOTTOM_FACE,
    CYLINDER_SIDE,
    TABLE_FACE,
    Box,
    Cylinder,
    ModelRegistry,
    PlaneFeature,
    Pose,
    look_at,
    quat_multiply,
    relative,
    so3_exp,
    table_feature,
    transform_feature,
)
from .relations import ContactRelation

_LOGGER = logging.getLogger(__name__)

_NEAR_PLANE = 1e-3  # meters; splats closer than this are dropped
_MAX_SPLAT_RADIUS = 6  # pixels
_STACK_PROBABILITY = 0.25
_LYING_PROBABILITY = 0.3


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera: focal lengths and principal point in pixels, image size."""

    fx: float = DEFAULT_FX
    fy: float = DEFAULT_FY
    cx: float = DEFAULT_CX
    cy: float = DEFAULT_CY
    width: int = DEFAULT_WIDTH
    height: int = DEFAULT_HEIGHT

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Continuous pixel coordinates (u, v) and depth z of camera-frame points."""
        points = np.atleast_2d(points)
        z = points[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * points[:, 0] / z + self.cx
            v = self.fy * points[:, 1] / z + self.cy
        return u, v, z

    def to_dict(self) -> dict[str, float]:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }


@dataclass(frozen=True)
class NoiseSpec:
    """Parametric noise of the simulated front-end."""

    odom_sigma: tuple[float, float] = (DEFAULT_ODOM_SIGMA_ROT, DEFAULT_ODOM_SIGMA_TRANS)
    meas_sigma: tuple[float, float] = (DEFAULT_MEAS_SIGMA_ROT, DEFAULT_MEAS_SIGMA_TRANS)
    false_positive_rate: float = DEFAULT_FALSE_POSITIVE_RATE
    miss_rate: float = DEFAULT_MISS_RATE
    class_confusion_rate: float = DEFAULT_CLASS_CONFUSION_RATE
    rng_seed: int = 0
    confidence_true: tuple[float, float] = DEFAULT_CONFIDENCE_RANGE
    confidence_false: tuple[float, float] = DEFAULT_CONFIDENCE_RANGE

    def __post_init__(self) -> None:
        """Reject negative sigmas and out-of-range rates."""
        if min(self.odom_sigma) < 0.0 or min(self.meas_sigma) < 0.0:
            raise ConfigError("Noise sigmas must be >= 0")
        if self.false_positive_rate < 0.0:
            raise ConfigError("false_positive_rate must be >= 0")
        for name in ("miss_rate", "class_confusion_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        for name in ("confidence_true", "confidence_false"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigError(f"{name} must satisfy 0 <= lo <= hi <= 1")

    @classmethod
    def noiseless(cls, rng_seed: int = 0) -> NoiseSpec:
        return cls((0.0, 0.0), (0.0, 0.0), 0.0, 0.0, 0.0, rng_seed)

    def to_dict(self) -> dict[str, Any]:
        return {
            "odom_sigma": list(self.odom_sigma),
            "meas_sigma": list(self.meas_sigma),
            "false_positive_rate": self.false_positive_rate,
            "miss_rate": self.miss_rate,
            "class_confusion_rate": self.class_confusion_rate,
            "rng_seed": self.rng_seed,
            "confidence_true": list(self.confidence_true),
            "confidence_false": list(self.confidence_false),
        }


@dataclass(frozen=True)
class SceneObject:
    """Ground-truth object instance."""

    object_id: int
    class_id: int
    pose: Pose

    @property
    def id(self) -> int:
        return self.object_id


@dataclass
class GroundTruthScene:
    """Objects resting on a table, plus the generator's own contact list."""

    objects: list[SceneObject]
    table_extents: tuple[float, float] = DEFAULT_TABLE_EXTENTS
    gravity: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_GRAVITY))
    contacts: list[ContactRelation] = field(default_factory=list)

    @property
    def table(self) -> PlaneFeature:
        return table_feature(self.table_extents)

    def object(self, object_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.object_id == object_id:
                return obj
        raise KeyError(object_id)


@dataclass
class CameraFrame:
    """One keyframe: camera pose, intrinsics and the rendered depth image."""

    t: int
    pose: Pose
    intrinsics: Intrinsics
    depth: np.ndarray
    labels: np.ndarray | None = None  # winning object id per pixel, TABLE_ID for the table, -1 for none

    def visible_pixels(self) -> dict[int, int]:
        """Pixel count per object id (table excluded)."""
        if self.labels is None:
            return {}
        ids, counts = np.unique(self.labels[self.labels > TABLE_ID], return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


@dataclass(frozen=True)
class SemanticMeasurement:
    """One detection: class label and object pose in the camera frame."""

    t: int
    class_id: int
    pose: Pose
    confidence: float
    source_object: int = -1  # simulator label, -1 for spurious detections


@dataclass
class SimulatedDataset:
    """Everything one simulated run produces."""

    scene: GroundTruthScene
    trajectory: list[Pose]
    frames: list[CameraFrame]
    measurements: list[list[SemanticMeasurement]]
    odometry: list[Pose]
    noise: NoiseSpec
    registry: ModelRegistry
    seed: int = 0

    @property
    def anchor(self) -> Pose:
        """First ground-truth camera pose; maps a run's first-camera frame onto the world."""
        return self.trajectory[0]

    @property
    def table_observation(self) -> PlaneFeature:
        """The table plane as seen from the first camera, handed to the mapper like the models."""
        return transform_feature(self.scene.table, self.anchor.inverse())


# === Scene generation ===


def _yaw(angle: float) -> np.ndarray:
    return so3_exp(np.array([0.0, 0.0, angle]))


def _footprint_radius(registry: ModelRegistry, class_id: int, lying: bool) -> float:
    shape = registry[class_id].shape
    if isinstance(shape, Box):
        return 0.5 * math.hypot(shape.extents[0], shape.extents[1])
    if lying:
        return 0.5 * math.hypot(2.0 * shape.radius, shape.height)
    return shape.radius


def _base_height(registry: ModelRegistry, class_id: int, lying: bool) -> float:
    """Height of the body origin above its supporting plane."""
    shape = registry[class_id].shape
    if isinstance(shape, Box):
        return 0.5 * shape.extents[2]
    return shape.radius if lying else 0.5 * shape.height


def _world_points(registry: ModelRegistry, obj: SceneObject) -> np.ndarray:
    return obj.pose.transform_points(registry[obj.class_id].surface_points)


def _clear_of(registry: ModelRegistry, candidate: SceneObject, other: SceneObject, clearance: float) -> bool:
    """True when every sampled point of each object stays `clearance` away from the other."""
    model_c = registry[candidate.class_id]
    model_o = registry[other.class_id]
    pts_c = other.pose.inverse().transform_points(_world_points(registry, candidate))
    if model_o.signed_distance(pts_c).min() < clearance:
        return False
    pts_o = candidate.pose.inverse().transform_points(_world_points(registry, other))
    return bool(model_c.signed_distance(pts_o).min() >= clearance)


def _supports(registry: ModelRegistry, obj: SceneObject) -> bool:
    """Only upright boxes offer a top face to stack on."""
    return isinstance(registry[obj.class_id].shape, Box)


def generate_scene(
    n_objects: int,
    registry: ModelRegistry,
    rng_seed: int,
    table_extents: Sequence[float] = DEFAULT_TABLE_EXTENTS,
    clearance: float = DEFAULT_PLACEMENT_CLEARANCE,
    attempts: int = DEFAULT_PLACEMENT_ATTEMPTS,
    contact_tolerance: float = DEFAULT_CONTACT_TOLERANCE,
) -> GroundTruthScene:
    """Place objects on the table by rejection sampling, stacking allowed.

    A stacked object may sink at most `contact_tolerance` into its supporter.
    """
    if n_objects < 1:
        raise ConfigError(f"n_objects must be >= 1, got {n_objects}")
    rng = np.random.default_rng(rng_seed)
    hx, hy = 0.5 * table_extents[0], 0.5 * table_extents[1]
    objects: list[SceneObject] = []
    contacts: list[ContactRelation] = []
    class_ids = registry.class_ids

    for object_id in range(1, n_objects + 1):
        placed = False
        for _ in range(attempts):
            class_id = int(rng.choice(class_ids))
            model = registry[class_id]
            is_cylinder = isinstance(model.shape, Cylinder)
            supporters = [o for o in objects if _supports(registry, o)]
            supporter = None
            if supporters and rng.random() < _STACK_PROBABILITY:
                supporter = supporters[int(rng.integers(len(supporters)))]
            lying = is_cylinder and supporter is None and rng.random() < _LYING_PROBABILITY
            radius = _footprint_radius(registry, class_id, lying)
            yaw = rng.uniform(-math.pi, math.pi)

            if supporter is None:
                if radius >= min(hx, hy):
                    continue
                xy = np.array([rng.uniform(-hx + radius, hx - radius), rng.uniform(-hy + radius, hy - radius)])
                base = np.array([xy[0], xy[1], 0.0])
                base_yaw = np.array([1.0, 0.0, 0.0, 0.0])
            else:
                top = registry[supporter.class_id].shape.half
                if radius >= min(top[0], top[1]):
                    continue
                local = np.array(
                    [
                        rng.uniform(-top[0] + radius, top[0] - radius),
                        rng.uniform(-top[1] + radius, top[1] - radius),
                        top[2],
                    ]
                )
                base = supporter.pose.transform_points(local)
                base_yaw = supporter.pose.q

            q = quat_multiply(base_yaw, _yaw(yaw))
            if lying:
                q = quat_multiply(q, so3_exp(np.array([0.5 * math.pi, 0.0, 0.0])))
            pose = Pose(q, base + np.array([0.0, 0.0, _base_height(registry, class_id, lying)]))
            candidate = SceneObject(object_id, class_id, pose)

            if supporter is None:
                pts = _world_points(registry, candidate)
                if np.any(np.abs(pts[:, 0]) > hx) or np.any(np.abs(pts[:, 1]) > hy):
                    continue
            if not all(
                _clear_of(registry, candidate, other, clearance) for other in objects if other is not supporter
            ):
                continue
            if supporter is not None and not _clear_of(registry, candidate, supporter, -contact_tolerance):
                continue

            objects.append(candidate)
            if supporter is None:
                if lying:
                    contacts.append(ContactRelation(RELATION_P2C, TABLE_ID, object_id, TABLE_FACE, CYLINDER_SIDE))
                else:
                    bottom = CYLINDER_BOTTOM_FACE if is_cylinder else BOX_BOTTOM_FACE
                    contacts.append(ContactRelation(RELATION_P2P, TABLE_ID, object_id, TABLE_FACE, bottom))
            else:
                bottom = CYLINDER_BOTTOM_FACE if is_cylinder else BOX_BOTTOM_FACE
                contacts.append(
                    ContactRelation(RELATION_P2P, supporter.object_id, object_id, BOX_TOP_FACE, bottom)
                )
            _LOGGER.debug(
                "Placed object %d (class %d) on %s",
                object_id,
                class_id,
                "table" if supporter is None else f"object {supporter.object_id}",
            )
            placed = True
            break
        if not placed:
            raise PlacementFailure(f"No valid placement for object {object_id} after {attempts} attempts")

    _LOGGER.info("Generated scene with %d objects and %d contacts", len(objects), len(contacts))
    return GroundTruthScene(objects, tuple(float(v) for v in table_extents), np.array(DEFAULT_GRAVITY), contacts)


# === Trajectory ===


def orbit_trajectory(
    n_frames: int,
    radius: float = DEFAULT_ORBIT_RADIUS,
    height: float = DEFAULT_ORBIT_HEIGHT,
    sweep: float = DEFAULT_ORBIT_SWEEP,
    start_angle: float = -0.5 * math.pi,
) -> list[Pose]:
    """Camera poses on a circular arc around the table, looking at its center."""
    if n_frames < 1:
        raise ConfigError("n_frames must be >= 1")
    steps = max(1, n_frames - 1)
    poses = []
    for i in range(n_frames):
        angle = start_angle + sweep * i / steps
        eye = (radius * math.cos(angle), radius * math.sin(angle), height)
        poses.append(look_at(eye, (0.0, 0.0, 0.05)))
    return poses


# === Rendering ===


def _table_points(extents: Sequence[float], spacing: float) -> np.ndarray:
    xs = np.arange(-0.5 * extents[0], 0.5 * extents[0] + 1e-12, spacing)
    ys = np.arange(-0.5 * extents[1], 0.5 * extents[1] + 1e-12, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack((gx.ravel(), gy.ravel(), np.zeros(gx.size)))


def splat_points(
    points_cam: np.ndarray,
    ids: np.ndarray,
    intrinsics: Intrinsics,
    spacing: float = DEFAULT_SAMPLE_SPACING,
) -> tuple[np.ndarray, np.ndarray]:
    """Point-splat z-buffer: nearest depth per pixel and the id that produced it.

    Each point covers a square footprint whose half-width matches the sample spacing
    projected at its depth, so a densely sampled surface renders without holes.
    """
    width, height = intrinsics.width, intrinsics.height
    depth = np.zeros((height, width), dtype=np.float32)
    labels = np.full((height, width), -1, dtype=np.int16)
    if len(points_cam) == 0:
        return depth, labels

    u, v, z = intrinsics.project(points_cam)
    front = z > _NEAR_PLANE
    u, v, z, ids = u[front], v[front], z[front], np.asarray(ids)[front]
    if len(z) == 0:
        return depth, labels

    ui = np.rint(u).astype(np.int64)
    vi = np.rint(v).astype(np.int64)
    radius = np.minimum(np.rint(0.5 * spacing * max(intrinsics.fx, intrinsics.fy) / z), _MAX_SPLAT_RADIUS)
    radius = radius.astype(np.int64)
    reach = int(radius.max())

    flat_chunks, z_chunks, id_chunks = [], [], []
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            uu = ui + dx
            vv = vi + dy
            inside = (uu >= 0) & (uu < width) & (vv >= 0) & (vv < height)
            mask = (np.abs(dx) <= radius) & (np.abs(dy) <= radius) & inside
            if not mask.any():
                continue
            flat_chunks.append(vv[mask] * width + uu[mask])
            z_chunks.append(z[mask])
            id_chunks.append(ids[mask])
    if not flat_chunks:
        return depth, labels

    flat = np.concatenate(flat_chunks)
    zs = np.concatenate(z_chunks)
    owners = np.concatenate(id_chunks)
    order = np.lexsort((owners, zs, flat))
    flat, zs, owners = flat[order], zs[order], owners[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    depth.ravel()[flat[first]] = zs[first]
    labels.ravel()[flat[first]] = owners[first]
    return depth, labels


def render_depth(
    scene: GroundTruthScene,
    camera: Pose,
    intrinsics: Intrinsics,
    registry: ModelRegistry,
    t: int = 0,
    include_table: bool = True,
    spacing: float = DEFAULT_SAMPLE_SPACING,
) -> CameraFrame:
    """Render the scene's surface points through the pinhole model into a depth image."""
    to_camera = camera.inverse()
    chunks, ids = [], []
    for obj in scene.objects:
        pts = _world_points(registry, obj)
        chunks.append(to_camera.transform_points(pts))
        ids.append(np.full(len(pts), obj.object_id, dtype=np.int64))
    if include_table:
        table_pts = _table_points(scene.table_extents, spacing)
        chunks.append(to_camera.transform_points(table_pts))
        ids.append(np.full(len(table_pts), TABLE_ID, dtype=np.int64))
    if chunks:
        depth, labels = splat_points(np.vstack(chunks), np.concatenate(ids), intrinsics, spacing)
    else:
        depth = np.zeros((intrinsics.height, intrinsics.width), dtype=np.float32)
        labels = np.full((intrinsics.height, intrinsics.width), -1, dtype=np.int16)
    return CameraFrame(t, camera, intrinsics, depth, labels)


def render_model(model_points: np.ndarray, pose_cam: Pose, intrinsics: Intrinsics, spacing: float) -> np.ndarray:
    """Render one model alone at a camera-frame pose; returns its depth image."""
    depth, _ = splat_points(
        pose_cam.transform_points(model_points), np.zeros(len(model_points), dtype=np.int64), intrinsics, spacing
    )
    return depth


def back_project_depth(depth: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """Camera-frame points of every pixel with a depth return."""
    vs, us = np.nonzero(depth > 0.0)
    z = depth[vs, us]
    x = (us - intrinsics.cx) * z / intrinsics.fx
    y = (vs - intrinsics.cy) * z / intrinsics.fy
    return np.column_stack((x, y, z))


def back_project(frame: CameraFrame) -> np.ndarray:
    """Observation point cloud of a frame, camera frame."""
    return back_project_depth(frame.depth, frame.intrinsics)


# === Measurement and odometry noise ===


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def perturb_pose(pose: Pose, sigma_rot: float, sigma_trans: float, rng: np.random.Generator) -> Pose:
    """Axis-angle rotation noise (random axis, angle ~ N(0, sigma_rot)) and Gaussian translation noise."""
    q, t = pose.q, pose.t
    if sigma_rot > 0.0:
        axis = _random_unit(rng)
        q = quat_multiply(q, so3_exp(axis * rng.normal(0.0, sigma_rot)))
    if sigma_trans > 0.0:
        t = t + rng.normal(0.0, sigma_trans, size=3)
    return Pose(q, t)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def emit_measurements(
    scene: GroundTruthScene,
    frame: CameraFrame,
    noise: NoiseSpec,
    rng: np.random.Generator,
    registry: ModelRegistry,
    min_visible_pixels: int = DEFAULT_MIN_VISIBLE_PIXELS,
    fp_offset: float = DEFAULT_FP_OFFSET,
) -> list[SemanticMeasurement]:
    """Noisy detections of the visible objects plus Poisson-many spurious ones."""
    sigma_rot, sigma_trans = noise.meas_sigma
    visible = frame.visible_pixels()
    class_ids = registry.class_ids
    measurements: list[SemanticMeasurement] = []

    for obj in scene.objects:
        if visible.get(obj.object_id, 0) < min_visible_pixels:
            continue
        if noise.miss_rate > 0.0 and rng.random() < noise.miss_rate:
            continue
        pose = perturb_pose(relative(frame.pose, obj.pose), sigma_rot, sigma_trans, rng)
        class_id = obj.class_id
        if noise.class_confusion_rate > 0.0 and len(class_ids) > 1 and rng.random() < noise.class_confusion_rate:
            others = [c for c in class_ids if c != obj.class_id]
            class_id = int(others[int(rng.integers(len(others)))])
        confidence = float(rng.uniform(*noise.confidence_true))
        measurements.append(SemanticMeasurement(frame.t, class_id, pose, confidence, obj.object_id))

    n_spurious = int(rng.poisson(noise.false_positive_rate)) if noise.false_positive_rate > 0.0 else 0
    if n_spurious:
        cloud = back_project(frame)
        for _ in range(n_spurious):
            if len(cloud):
                anchor = cloud[int(rng.integers(len(cloud)))]
            else:
                anchor = np.array([0.0, 0.0, 1.0])
            center = anchor + _random_unit(rng) * rng.uniform(0.0, fp_offset)
            class_id = int(class_ids[int(rng.integers(len(class_ids)))])
            confidence = float(rng.uniform(*noise.confidence_false))
            measurements.append(
                SemanticMeasurement(frame.t, class_id, Pose(_random_rotation(rng), center), confidence, -1)
            )
        # detectors report in no particular order
        order = rng.permutation(len(measurements))
        measurements = [measurements[i] for i in order]
    return measurements


def emit_odometry(trajectory: Sequence[Pose], noise: NoiseSpec, rng: np.random.Generator) -> list[Pose]:
    """Noisy relative motions; element i is relative(x_i, x_{i+1}) perturbed."""
    if len(trajectory) < 2:
        raise ConfigError("Odometry needs at least two poses")
    sigma_rot, sigma_trans = noise.odom_sigma
    return [
        perturb_pose(relative(trajectory[i - 1], trajectory[i]), sigma_rot, sigma_trans, rng)
        for i in range(1, len(trajectory))
    ]


def simulate_sequence(
    registry: ModelRegistry,
    n_objects: int,
    n_frames: int,
    noise: NoiseSpec,
    seed: int,
    intrinsics: Intrinsics | None = None,
    min_visible_pixels: int = DEFAULT_MIN_VISIBLE_PIXELS,
    table_extents: Sequence[float] = DEFAULT_TABLE_EXTENTS,
    workers: int = 1,
) -> SimulatedDataset:
    """Generate a scene, orbit it, render each keyframe and emit measurements and odometry."""
    intrinsics = intrinsics or Intrinsics()
    scene = generate_scene(n_objects, registry, seed, table_extents)
    trajectory = orbit_trajectory(n_frames)
    spacing = registry[registry.class_ids[0]].spacing

    def _render(index: int) -> CameraFrame:
        return render_depth(scene, trajectory[index], intrinsics, registry, t=index, spacing=spacing)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            frames = list(pool.map(_render, range(n_frames)))
    else:
        frames = [_render(i) for i in range(n_frames)]

    rng = np.random.default_rng(noise.rng_seed)
    measurements = [emit_measurements(scene, f, noise, rng, registry, min_visible_pixels) for f in frames]
    odometry = emit_odometry(trajectory, noise, rng) if n_frames > 1 else []
    _LOGGER.info(
        "Simulated %d frames, %d measurements (%d spurious)",
        n_frames,
        sum(len(m) for m in measurements),
        sum(1 for ms in measurements for m in ms if m.source_object < 0),
    )
    return SimulatedDataset(scene, trajectory, frames, measurements, odometry, noise, registry, seed)
