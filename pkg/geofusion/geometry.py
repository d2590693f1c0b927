"""SE(3) arithmetic, shape primitives and surface features."""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable, Sequence, Union

import numpy as np

from .const import (
    CURVE_HULL_POINTS,
    DEFAULT_SAMPLE_SPACING,
    MODELS_SCHEMA,
    POSE_TOLERANCE,
    SHAPE_BOX,
    SHAPE_CYLINDER,
)
from .exceptions import ConfigError

_LOGGER = logging.getLogger(__name__)

_SMALL_ANGLE = 1e-8


# === SO(3) helpers ===


def skew(v: np.ndarray) -> np.ndarray:
    """Return the cross-product matrix of a 3-vector."""
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Normalize a (w, x, y, z) quaternion and fix its sign so that w >= 0."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    if q[0] < 0.0:
        q = -q
    elif q[0] == 0.0:
        # w == 0 leaves the sign open; the first nonzero vector entry decides
        for value in q[1:]:
            if value != 0.0:
                if value < 0.0:
                    q = -q
                break
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion of a rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=float)
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0.0:
        s = 2.0 * math.sqrt(trace + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_canonical(np.array(q))


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Quaternion of a rotation vector."""
    phi = np.asarray(phi, dtype=float)
    angle = float(np.linalg.norm(phi))
    if angle < _SMALL_ANGLE:
        q = np.array([1.0, 0.5 * phi[0], 0.5 * phi[1], 0.5 * phi[2]])
    else:
        half = 0.5 * angle
        q = np.concatenate(([math.cos(half)], math.sin(half) / angle * phi))
    return quat_canonical(q)


def so3_log(q: np.ndarray) -> np.ndarray:
    """Rotation vector of a unit quaternion, angle in [0, pi]."""
    q = quat_canonical(q)
    w = q[0]
    v = q[1:]
    n = float(np.linalg.norm(v))
    if n < _SMALL_ANGLE:
        # first-order expansion of 2 atan2(n, w) / n
        return (2.0 / w) * v
    return (2.0 * math.atan2(n, w) / n) * v


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3) at the rotation vector phi."""
    angle = float(np.linalg.norm(phi))
    phi_x = skew(phi)
    if angle < 1e-6:
        return np.eye(3) + 0.5 * phi_x + (1.0 / 12.0) * phi_x @ phi_x
    coeff = 1.0 / angle**2 - (1.0 + math.cos(angle)) / (2.0 * angle * math.sin(angle))
    return np.eye(3) + 0.5 * phi_x + coeff * phi_x @ phi_x


# === Pose ===


class Pose:
    """Rigid transform: unit quaternion (w, x, y, z) and translation in meters."""

    __slots__ = ("q", "t")

    def __init__(self, q: Sequence[float] | np.ndarray | None = None, t: Sequence[float] | np.ndarray | None = None):
        """Build a pose; the quaternion is renormalized to w >= 0."""
        self.q = quat_canonical(np.array([1.0, 0.0, 0.0, 0.0]) if q is None else np.asarray(q, dtype=float))
        self.t = np.zeros(3) if t is None else np.asarray(t, dtype=float).reshape(3).copy()

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose:
        """Build a pose from a 4x4 homogeneous matrix."""
        m = np.asarray(m, dtype=float)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec: Sequence[float], t: Sequence[float] | None = None) -> Pose:
        return cls(so3_exp(np.asarray(rotvec, dtype=float)), t)

    @classmethod
    def exp(cls, delta: np.ndarray) -> Pose:
        """Map a tangent vector (rot 3, trans 3) to a pose."""
        delta = np.asarray(delta, dtype=float)
        return cls(so3_exp(delta[:3]), delta[3:6])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.t
        return m

    def compose(self, other: Pose) -> Pose:
        """Return self * other."""
        return Pose(quat_multiply(self.q, other.q), self.rotation @ other.t + self.t)

    def inverse(self) -> Pose:
        q_inv = np.array([self.q[0], -self.q[1], -self.q[2], -self.q[3]])
        return Pose(q_inv, -(quat_to_matrix(q_inv) @ self.t))

    def log(self) -> np.ndarray:
        """Minimal coordinates: axis-angle rotation (radians) then translation (meters)."""
        return np.concatenate((so3_log(self.q), self.t))

    def retract(self, delta: np.ndarray) -> Pose:
        """Right perturbation self * exp(delta)."""
        return self.compose(Pose.exp(delta))

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        """Map body-frame points (N x 3 or 3) into the parent frame."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.t

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        """Map direction vectors by rotation only."""
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def rotation_angle_to(self, other: Pose) -> float:
        return float(np.linalg.norm(so3_log(quat_multiply(np.array([self.q[0], *(-self.q[1:])]), other.q))))

    def translation_distance_to(self, other: Pose) -> float:
        return float(np.linalg.norm(self.t - other.t))

    def is_close(self, other: Pose, tol: float = POSE_TOLERANCE) -> bool:
        return self.rotation_angle_to(other) <= tol and self.translation_distance_to(other) <= tol

    def to_dict(self) -> dict[str, list[float]]:
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Pose:
        return cls(data["q"], data["t"])

    def __repr__(self) -> str:
        return f"Pose(q={np.round(self.q, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """a then b applied to body coordinates (a * b)."""
    return a.compose(b)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def relative(a: Pose, b: Pose) -> Pose:
    """Relative transform inverse(a) * b, so that compose(a, relative(a, b)) == b."""
    return a.inverse().compose(b)


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 0.0, 1.0)) -> Pose:
    """Camera pose (x right, y down, z forward) at eye looking at target."""
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=float))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(matrix_to_quat(np.column_stack((right, down, forward))), eye)


# === Shapes ===


@dataclass(frozen=True)
class Box:
    """Axis-aligned box centered at the body origin; extents are full side lengths."""

    extents: tuple[float, float, float]

    @property
    def half(self) -> np.ndarray:
        return 0.5 * np.asarray(self.extents, dtype=float)


@dataclass(frozen=True)
class Cylinder:
    """Cylinder centered at the body origin with its axis along body z."""

    radius: float
    height: float


Shape = Union[Box, Cylinder]


@dataclass(frozen=True, eq=False)
class PlaneFeature:
    """Planar face: center, boundary polygon (cyclic order) and outward normal."""

    center: np.ndarray
    boundary: np.ndarray
    normal: np.ndarray

    kind = "plane"


@dataclass(frozen=True, eq=False)
class CurvedFeature:
    """Curved surface around an axis; box edges are curved features of radius 0."""

    center: np.ndarray
    axis: np.ndarray
    boundary: np.ndarray
    radius: float

    kind = "curved"


SurfaceFeature = Union[PlaneFeature, CurvedFeature]


def _grid(length: float, spacing: float) -> np.ndarray:
    count = max(2, int(math.ceil(length / spacing - 1e-9)) + 1)
    return np.linspace(-0.5 * length, 0.5 * length, count)


def _sample_box(shape: Box, spacing: float) -> np.ndarray:
    half = shape.half
    chunks = []
    for k in range(3):
        i, j = [a for a in range(3) if a != k]
        gi, gj = np.meshgrid(_grid(shape.extents[i], spacing), _grid(shape.extents[j], spacing), indexing="ij")
        for sign in (1.0, -1.0):
            pts = np.zeros((gi.size, 3))
            pts[:, i] = gi.ravel()
            pts[:, j] = gj.ravel()
            pts[:, k] = sign * half[k]
            chunks.append(pts)
    return np.vstack(chunks)


def _ring(radius: float, spacing: float, minimum: int = 1) -> np.ndarray:
    count = max(minimum, int(math.ceil(2.0 * math.pi * radius / spacing)))
    theta = np.arange(count) * (2.0 * math.pi / count)
    return np.column_stack((radius * np.cos(theta), radius * np.sin(theta)))


def _sample_cylinder(shape: Cylinder, spacing: float) -> np.ndarray:
    chunks = []
    rim = _ring(shape.radius, spacing, minimum=8)
    for z in _grid(shape.height, spacing):
        chunks.append(np.column_stack((rim, np.full(len(rim), z))))
    radii = np.linspace(0.0, shape.radius, max(2, int(math.ceil(shape.radius / spacing - 1e-9)) + 1))
    for z in (0.5 * shape.height, -0.5 * shape.height):
        for rho in radii[:-1]:
            ring = np.zeros((1, 2)) if rho == 0.0 else _ring(rho, spacing)
            chunks.append(np.column_stack((ring, np.full(len(ring), z))))
    return np.vstack(chunks)


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """Rigid convex primitive with its derived surface samples."""

    class_id: int
    name: str
    shape: Shape
    symmetry_axis: np.ndarray | None = None
    spacing: float = DEFAULT_SAMPLE_SPACING
    surface_points: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        """Validate dimensions and sample the boundary."""
        if isinstance(self.shape, Box):
            if min(self.shape.extents) <= 0.0:
                raise ConfigError(f"Box extents must be positive, got {self.shape.extents}")
            points = _sample_box(self.shape, self.spacing)
        elif isinstance(self.shape, Cylinder):
            if self.shape.radius <= 0.0 or self.shape.height <= 0.0:
                raise ConfigError(f"Cylinder dims must be positive, got {self.shape}")
            # the rotation axis is always the symmetry axis
            object.__setattr__(self, "symmetry_axis", np.array([0.0, 0.0, 1.0]))
            points = _sample_cylinder(self.shape, self.spacing)
        else:
            raise ConfigError(f"Unsupported shape {self.shape!r}")
        if self.surface_points is None:
            object.__setattr__(self, "surface_points", points)

    @property
    def shape_name(self) -> str:
        return SHAPE_BOX if isinstance(self.shape, Box) else SHAPE_CYLINDER

    @property
    def dims(self) -> list[float]:
        if isinstance(self.shape, Box):
            return [float(v) for v in self.shape.extents]
        return [float(self.shape.radius), float(self.shape.height)]

    @property
    def half_extents(self) -> np.ndarray:
        """Half sizes of the body-frame bounding box."""
        if isinstance(self.shape, Box):
            return self.shape.half
        return np.array([self.shape.radius, self.shape.radius, 0.5 * self.shape.height])

    def obb_corners(self) -> np.ndarray:
        """Eight corners of the body-frame bounding box."""
        half = self.half_extents
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        return signs * half

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Analytic signed distance of body-frame points (negative inside)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if isinstance(self.shape, Box):
            q = np.abs(points) - self.shape.half
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            return outside + inside
        radial = np.hypot(points[:, 0], points[:, 1]) - self.shape.radius
        axial = np.abs(points[:, 2]) - 0.5 * self.shape.height
        d = np.column_stack((radial, axial))
        return np.linalg.norm(np.maximum(d, 0.0), axis=1) + np.minimum(d.max(axis=1), 0.0)

    def to_dict(self) -> dict[str, Any]:
        return {"class_id": self.class_id, "name": self.name, "shape": self.shape_name, "dims": self.dims}


def make_model(class_id: int, name: str, shape: str, dims: Sequence[float], spacing: float = DEFAULT_SAMPLE_SPACING):
    """Build an ObjectModel from registry fields."""
    if shape == SHAPE_BOX:
        if len(dims) != 3:
            raise ConfigError(f"Box '{name}' needs 3 dims, got {list(dims)}")
        return ObjectModel(class_id, name, Box(tuple(float(v) for v in dims)), spacing=spacing)
    if shape == SHAPE_CYLINDER:
        if len(dims) != 2:
            raise ConfigError(f"Cylinder '{name}' needs radius and height, got {list(dims)}")
        return ObjectModel(class_id, name, Cylinder(float(dims[0]), float(dims[1])), spacing=spacing)
    raise ConfigError(f"Unknown shape '{shape}' for model '{name}'")


# === Surface features ===

_BOX_FACE_ORDER = ((0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0), (2, -1.0))
_EDGE_SIGNS = ((1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0))

# Feature indices used by the scene generator for resting contacts
BOX_TOP_FACE = 4
BOX_BOTTOM_FACE = 5
CYLINDER_TOP_FACE = 0
CYLINDER_BOTTOM_FACE = 1
CYLINDER_SIDE = 2
TABLE_FACE = 0


def _box_features(shape: Box) -> list[SurfaceFeature]:
    half = shape.half
    features: list[SurfaceFeature] = []
    for k, sign in _BOX_FACE_ORDER:
        i, j = [a for a in range(3) if a != k]
        normal = np.zeros(3)
        normal[k] = sign
        center = normal * half[k]
        corners = []
        for si, sj in _EDGE_SIGNS:
            corner = center.copy()
            corner[i] = si * half[i]
            corner[j] = sj * half[j]
            corners.append(corner)
        features.append(PlaneFeature(center, np.array(corners), normal))
    for k in range(3):
        i, j = [a for a in range(3) if a != k]
        axis = np.zeros(3)
        axis[k] = 1.0
        for si, sj in _EDGE_SIGNS:
            center = np.zeros(3)
            center[i] = si * half[i]
            center[j] = sj * half[j]
            ends = np.array([center - half[k] * axis, center + half[k] * axis])
            features.append(CurvedFeature(center, axis, ends, 0.0))
    return features


def _cylinder_features(shape: Cylinder) -> list[SurfaceFeature]:
    h = 0.5 * shape.height
    rim = _ring(shape.radius, 1.0, minimum=CURVE_HULL_POINTS)[:CURVE_HULL_POINTS]
    features: list[SurfaceFeature] = []
    for sign in (1.0, -1.0):
        center = np.array([0.0, 0.0, sign * h])
        boundary = np.column_stack((rim, np.full(len(rim), sign * h)))
        if sign < 0.0:
            boundary = boundary[::-1]
        features.append(PlaneFeature(center, boundary, np.array([0.0, 0.0, sign])))
    axis = np.array([0.0, 0.0, 1.0])
    features.append(CurvedFeature(np.zeros(3), axis, np.array([-h * axis, h * axis]), float(shape.radius)))
    return features


def extract_surface_features(model: ObjectModel) -> list[SurfaceFeature]:
    """Box: six faces then twelve zero-radius edges. Cylinder: top cap, bottom cap, side."""
    if isinstance(model.shape, Box):
        return _box_features(model.shape)
    return _cylinder_features(model.shape)


def table_feature(extents: Sequence[float]) -> PlaneFeature:
    """Upward-facing table plane at the world origin with a finite rectangular boundary."""
    hx, hy = 0.5 * float(extents[0]), 0.5 * float(extents[1])
    boundary = np.array([[hx, hy, 0.0], [-hx, hy, 0.0], [-hx, -hy, 0.0], [hx, -hy, 0.0]])
    return PlaneFeature(np.zeros(3), boundary, np.array([0.0, 0.0, 1.0]))


def transform_feature(feature: SurfaceFeature, pose: Pose) -> SurfaceFeature:
    """Points go through the full rigid transform, directions through the rotation only."""
    if isinstance(feature, PlaneFeature):
        return PlaneFeature(
            pose.transform_points(feature.center),
            pose.transform_points(feature.boundary),
            pose.rotate(feature.normal),
        )
    return CurvedFeature(
        pose.transform_points(feature.center),
        pose.rotate(feature.axis),
        pose.transform_points(feature.boundary),
        feature.radius,
    )


# === Model registry ===

# Household primitives sized like common grocery items (meters)
DEFAULT_MODELS: tuple[tuple[int, str, str, tuple[float, ...]], ...] = (
    (1, "cracker_box", SHAPE_BOX, (0.16, 0.06, 0.21)),
    (2, "sugar_box", SHAPE_BOX, (0.09, 0.04, 0.175)),
    (3, "tomato_soup_can", SHAPE_CYLINDER, (0.033, 0.101)),
    (4, "pudding_box", SHAPE_BOX, (0.11, 0.09, 0.035)),
    (5, "gelatin_box", SHAPE_BOX, (0.085, 0.07, 0.028)),
    (6, "potted_meat_can", SHAPE_BOX, (0.10, 0.05, 0.083)),
    (7, "master_chef_can", SHAPE_CYLINDER, (0.051, 0.139)),
    (8, "tuna_fish_can", SHAPE_CYLINDER, (0.043, 0.033)),
    (9, "wood_block", SHAPE_BOX, (0.085, 0.085, 0.2)),
    (10, "foam_brick", SHAPE_BOX, (0.075, 0.05, 0.05)),
)


class ModelRegistry:
    """Class id to ObjectModel lookup, with cached surface features."""

    def __init__(self, models: Iterable[ObjectModel]) -> None:
        """Index the models by class id."""
        self._models: dict[int, ObjectModel] = {}
        self._features: dict[int, list[SurfaceFeature]] = {}
        for model in models:
            if model.class_id < 1:
                raise ConfigError(f"class_id must be >= 1, got {model.class_id}")
            if model.class_id in self._models:
                raise ConfigError(f"Duplicate class_id {model.class_id}")
            self._models[model.class_id] = model
        if not self._models:
            raise ConfigError("Model registry is empty")

    @classmethod
    def default(cls, spacing: float = DEFAULT_SAMPLE_SPACING) -> ModelRegistry:
        return cls(make_model(cid, name, shape, dims, spacing) for cid, name, shape, dims in DEFAULT_MODELS)

    def __getitem__(self, class_id: int) -> ObjectModel:
        return self._models[class_id]

    def __contains__(self, class_id: object) -> bool:
        return class_id in self._models

    def __len__(self) -> int:
        return len(self._models)

    @property
    def class_ids(self) -> list[int]:
        return sorted(self._models)

    def features(self, class_id: int) -> list[SurfaceFeature]:
        """Body-frame surface features, extracted once per class."""
        if class_id not in self._features:
            self._features[class_id] = extract_surface_features(self._models[class_id])
        return self._features[class_id]

    def to_dict(self) -> dict[str, Any]:
        return {"schema": MODELS_SCHEMA, "models": [self._models[c].to_dict() for c in self.class_ids]}

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, data: Any, spacing: float = DEFAULT_SAMPLE_SPACING) -> ModelRegistry:
        """Accept either the bare list or the schema-tagged document."""
        if isinstance(data, dict):
            schema = data.get("schema")
            if schema != MODELS_SCHEMA:
                raise ConfigError(f"Unsupported model registry schema '{schema}'")
            entries = data.get("models", [])
        else:
            entries = data
        try:
            return cls(make_model(int(e["class_id"]), str(e["name"]), e["shape"], e["dims"], spacing) for e in entries)
        except (KeyError, TypeError, ValueError) as ex:
            raise ConfigError(f"Malformed model registry entry: {ex}") from ex

    @classmethod
    def load(cls, path: Path, spacing: float = DEFAULT_SAMPLE_SPACING) -> ModelRegistry:
        _LOGGER.debug("Loading model registry from %s", path)
        return cls.from_dict(json.loads(Path(path).read_text()), spacing)
