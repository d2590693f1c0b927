"""Contact relation inference between tracked objects and the table."""

from __future__ import annotations

from dataclasses import dataclass, field
import itertools
import logging
from typing import Any, Iterable, Protocol, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .const import (
    CURVE_HULL_POINTS,
    DEFAULT_EPS_C,
    DEFAULT_EPS_G,
    DEFAULT_EPS_N,
    DEFAULT_GRAVITY,
    DEGENERATE_AXES_NORM,
    RELATION_C2C,
    RELATION_KINDS,
    RELATION_P2C,
    RELATION_P2P,
    TABLE_ID,
)
from .exceptions import ConfigError, DegenerateAxes
from .geometry import (
    CurvedFeature,
    ModelRegistry,
    ObjectModel,
    PlaneFeature,
    Pose,
    SurfaceFeature,
    transform_feature,
)

_LOGGER = logging.getLogger(__name__)

_OVERLAP_TOL = 1e-9  # meters; touching projections count as overlapping

# Lower rank wins when several kinds connect the same object pair
_KIND_PRIORITY = {RELATION_P2P: 0, RELATION_P2C: 1, RELATION_C2C: 2}


class MapObject(Protocol):
    """Anything with an id, a class and a world pose."""

    id: int
    class_id: int
    pose: Pose


@dataclass(frozen=True)
class RelationConfig:
    """Direction and distance thresholds of the contact predicates."""

    eps_n_pp: float = DEFAULT_EPS_N
    eps_c_pp: float = DEFAULT_EPS_C
    eps_n_pc: float = DEFAULT_EPS_N
    eps_c_pc: float = DEFAULT_EPS_C
    eps_c_cc: float = DEFAULT_EPS_C
    eps_G: float = DEFAULT_EPS_G
    gravity: tuple[float, float, float] = DEFAULT_GRAVITY

    def __post_init__(self) -> None:
        """Check threshold ranges and normalize gravity."""
        for name in ("eps_n_pp", "eps_c_pp", "eps_n_pc", "eps_c_pc", "eps_c_cc", "eps_G"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be > 0")
        if self.eps_G >= 1.0:
            raise ConfigError("eps_G must be < 1")
        g = np.asarray(self.gravity, dtype=float)
        norm = np.linalg.norm(g)
        if norm == 0.0:
            raise ConfigError("gravity must be nonzero")
        object.__setattr__(self, "gravity", tuple(float(v) for v in g / norm))

    @property
    def gravity_vector(self) -> np.ndarray:
        return np.asarray(self.gravity)


@dataclass(frozen=True)
class ContactRelation:
    """A contact between feature feat_a of obj_a and feature feat_b of obj_b.

    For P2C the plane member is always side a.
    """

    kind: str
    obj_a: int
    obj_b: int
    feat_a: int
    feat_b: int
    residuals: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        if self.kind not in RELATION_KINDS:
            raise ConfigError(f"Unknown relation kind '{self.kind}'")
        if self.obj_a == self.obj_b:
            raise ConfigError("A relation needs two distinct objects")

    @property
    def key(self) -> tuple[str, frozenset[tuple[int, int]]]:
        """Identity that ignores which side is called a or b."""
        return self.kind, frozenset({(self.obj_a, self.feat_a), (self.obj_b, self.feat_b)})

    @property
    def objects(self) -> tuple[int, int]:
        return self.obj_a, self.obj_b

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "obj_a": self.obj_a,
            "obj_b": self.obj_b,
            "feat_a": self.feat_a,
            "feat_b": self.feat_b,
            "residuals": [float(r) for r in self.residuals],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ContactRelation:
        return cls(
            data["kind"],
            int(data["obj_a"]),
            int(data["obj_b"]),
            int(data["feat_a"]),
            int(data["feat_b"]),
            tuple(data.get("residuals", ())),
        )


# === Signed contact geometry ===


def p2p_terms(pa: PlaneFeature, pb: PlaneFeature) -> np.ndarray:
    """(N_a . N_b + 1, N_a . (C_b - C_a)); both vanish at a flush contact."""
    return np.array([pa.normal @ pb.normal + 1.0, pa.normal @ (pb.center - pa.center)])


def p2c_terms(p: PlaneFeature, c: CurvedFeature) -> np.ndarray:
    """(N_p . N_c, N_p . (C_c - C_p) - r) with the plane's outward normal."""
    return np.array([p.normal @ c.axis, p.normal @ (c.center - p.center) - c.radius])


def c2c_direction(ca: CurvedFeature, cb: CurvedFeature) -> np.ndarray:
    """Unit common normal of two axis lines."""
    cross = np.cross(ca.axis, cb.axis)
    norm = np.linalg.norm(cross)
    if norm < DEGENERATE_AXES_NORM:
        raise DegenerateAxes(f"Curved axes are parallel (|Na x Nb| = {norm:.3g})")
    return cross / norm


def c2c_term(ca: CurvedFeature, cb: CurvedFeature) -> float:
    """Axis-line distance minus the radii sum."""
    m = c2c_direction(ca, cb)
    return float(abs(m @ (cb.center - ca.center)) - (ca.radius + cb.radius))


# === Predicates ===


def check_p2p(pa: PlaneFeature, pb: PlaneFeature, cfg: RelationConfig) -> bool:
    direction, distance = p2p_terms(pa, pb)
    return bool(abs(direction) < cfg.eps_n_pp and abs(distance) < cfg.eps_c_pp)


def check_p2c(p: PlaneFeature, c: CurvedFeature, cfg: RelationConfig) -> bool:
    direction = p.normal @ c.axis
    distance = abs(p.normal @ (c.center - p.center)) - c.radius
    return bool(abs(direction) < cfg.eps_n_pc and abs(distance) < cfg.eps_c_pc)


def check_c2c(ca: CurvedFeature, cb: CurvedFeature, cfg: RelationConfig) -> bool:
    """Raises DegenerateAxes for parallel axes."""
    return abs(c2c_term(ca, cb)) < cfg.eps_c_cc


def support_direction_check(p: PlaneFeature, cfg: RelationConfig) -> bool:
    """A supporting plane cannot be parallel to gravity."""
    return bool(abs(cfg.gravity_vector @ p.normal) > cfg.eps_G)


# === Projection overlap (2D SAT) ===


def _horizontal_basis(gravity: np.ndarray) -> np.ndarray:
    """Two unit vectors spanning the plane perpendicular to gravity."""
    g = gravity / np.linalg.norm(gravity)
    helper = np.array([1.0, 0.0, 0.0]) if abs(g[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(g, helper)
    e1 /= np.linalg.norm(e1)
    return np.vstack((e1, np.cross(g, e1)))


def _footprint_points(feature: SurfaceFeature, basis: np.ndarray) -> np.ndarray:
    if isinstance(feature, PlaneFeature):
        return feature.boundary @ basis.T
    ends = feature.boundary @ basis.T
    if feature.radius == 0.0:
        return ends
    per_end = CURVE_HULL_POINTS // 2
    angles = np.linspace(0.0, 2.0 * np.pi, per_end, endpoint=False)
    circle = feature.radius * np.column_stack((np.cos(angles), np.sin(angles)))
    return np.vstack([end + circle for end in ends])


def convex_footprint(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull vertices; collapses to a segment or a point when degenerate."""
    unique = np.unique(np.round(points, 12), axis=0)
    if len(unique) >= 3:
        try:
            hull = ConvexHull(unique)
            return unique[hull.vertices]
        except QhullError:
            pass
    if len(unique) == 1:
        return unique
    centered = unique - unique.mean(axis=0)
    direction = np.linalg.svd(centered, full_matrices=False)[2][0]
    s = centered @ direction
    return unique[[int(np.argmin(s)), int(np.argmax(s))]]


def _axes(polygon: np.ndarray) -> list[np.ndarray]:
    if len(polygon) < 2:
        return []
    if len(polygon) == 2:
        d = polygon[1] - polygon[0]
        d = d / np.linalg.norm(d)
        return [np.array([-d[1], d[0]]), d]
    edges = np.roll(polygon, -1, axis=0) - polygon
    normals = np.column_stack((-edges[:, 1], edges[:, 0]))
    lengths = np.linalg.norm(normals, axis=1)
    return list(normals[lengths > 0.0] / lengths[lengths > 0.0, None])


def polygons_overlap(pa: np.ndarray, pb: np.ndarray, tol: float = _OVERLAP_TOL) -> bool:
    """2D separating axis test over both hulls' edge normals."""
    axes = _axes(pa) + _axes(pb)
    if not axes:
        return bool(np.linalg.norm(pa[0] - pb[0]) <= tol)
    for axis in axes:
        proj_a = pa @ axis
        proj_b = pb @ axis
        if proj_a.max() < proj_b.min() - tol or proj_b.max() < proj_a.min() - tol:
            return False
    return True


def projection_overlap_check(
    fa: SurfaceFeature, fb: SurfaceFeature, gravity: Sequence[float] = DEFAULT_GRAVITY
) -> bool:
    """Do the features' shadows along gravity intersect?"""
    basis = _horizontal_basis(np.asarray(gravity, dtype=float))
    return polygons_overlap(
        convex_footprint(_footprint_points(fa, basis)), convex_footprint(_footprint_points(fb, basis))
    )


# === Inference ===


def _pair_relations(
    id_a: int,
    feats_a: list[SurfaceFeature],
    id_b: int,
    feats_b: list[SurfaceFeature],
    cfg: RelationConfig,
) -> list[ContactRelation]:
    found: list[ContactRelation] = []
    gravity = cfg.gravity
    for (i, fa), (j, fb) in itertools.product(enumerate(feats_a), enumerate(feats_b)):
        a_plane = isinstance(fa, PlaneFeature)
        b_plane = isinstance(fb, PlaneFeature)
        if a_plane and b_plane:
            if (
                check_p2p(fa, fb, cfg)
                and support_direction_check(fa, cfg)
                and support_direction_check(fb, cfg)
                and projection_overlap_check(fa, fb, gravity)
            ):
                found.append(ContactRelation(RELATION_P2P, id_a, id_b, i, j, tuple(p2p_terms(fa, fb))))
        elif a_plane or b_plane:
            plane, curved = (fa, fb) if a_plane else (fb, fa)
            if (
                check_p2c(plane, curved, cfg)
                and support_direction_check(plane, cfg)
                and projection_overlap_check(plane, curved, gravity)
            ):
                terms = tuple(p2c_terms(plane, curved))
                if a_plane:
                    found.append(ContactRelation(RELATION_P2C, id_a, id_b, i, j, terms))
                else:
                    found.append(ContactRelation(RELATION_P2C, id_b, id_a, j, i, terms))
        else:
            try:
                hit = check_c2c(fa, fb, cfg)
            except DegenerateAxes:
                continue
            if hit and projection_overlap_check(fa, fb, gravity):
                found.append(ContactRelation(RELATION_C2C, id_a, id_b, i, j, (c2c_term(fa, fb),)))
    if not found:
        return []
    best = min(_KIND_PRIORITY[r.kind] for r in found)
    return [r for r in found if _KIND_PRIORITY[r.kind] == best]


def _bounding_radius(model: ObjectModel) -> float:
    return float(np.linalg.norm(model.half_extents))


def infer_relations(
    objects: Iterable[MapObject],
    table: PlaneFeature | None,
    registry: ModelRegistry,
    cfg: RelationConfig,
) -> list[ContactRelation]:
    """All contacts among the objects and the table, one relation per feature pair."""
    entries = sorted(objects, key=lambda o: o.id)
    world = {o.id: [transform_feature(f, o.pose) for f in registry.features(o.class_id)] for o in entries}
    reach = max(cfg.eps_c_pp, cfg.eps_c_pc, cfg.eps_c_cc)
    relations: list[ContactRelation] = []

    if table is not None:
        for obj in entries:
            relations.extend(_pair_relations(TABLE_ID, [table], obj.id, world[obj.id], cfg))

    for obj_a, obj_b in itertools.combinations(entries, 2):
        gap = np.linalg.norm(obj_a.pose.t - obj_b.pose.t)
        if gap > _bounding_radius(registry[obj_a.class_id]) + _bounding_radius(registry[obj_b.class_id]) + reach:
            continue
        relations.extend(_pair_relations(obj_a.id, world[obj_a.id], obj_b.id, world[obj_b.id], cfg))

    unique: dict[Any, ContactRelation] = {}
    for relation in relations:
        unique.setdefault(relation.key, relation)
    result = list(unique.values())
    _LOGGER.debug("Inferred %d relations among %d objects", len(result), len(entries))
    return result


# === Audit helpers ===


def interpenetration(model_a: ObjectModel, pose_a: Pose, model_b: ObjectModel, pose_b: Pose) -> float:
    """Deepest penetration (meters) of either object's surface samples into the other."""
    pts_a_in_b = pose_b.inverse().transform_points(pose_a.transform_points(model_a.surface_points))
    pts_b_in_a = pose_a.inverse().transform_points(pose_b.transform_points(model_b.surface_points))
    depth = max(-model_b.signed_distance(pts_a_in_b).min(), -model_a.signed_distance(pts_b_in_a).min())
    return float(max(depth, 0.0))


def relation_features(
    relation: ContactRelation,
    poses: dict[int, Pose],
    classes: dict[int, int],
    registry: ModelRegistry,
    table: PlaneFeature | None,
) -> tuple[SurfaceFeature, SurfaceFeature]:
    """World-frame features of both sides of a relation."""

    def _feature(obj_id: int, index: int) -> SurfaceFeature:
        if obj_id == TABLE_ID:
            if table is None:
                raise KeyError("Relation references the table but none was given")
            return table
        return transform_feature(registry.features(classes[obj_id])[index], poses[obj_id])

    return _feature(relation.obj_a, relation.feat_a), _feature(relation.obj_b, relation.feat_b)


def relation_residuals(
    relation: ContactRelation,
    poses: dict[int, Pose],
    classes: dict[int, int],
    registry: ModelRegistry,
    table: PlaneFeature | None,
) -> np.ndarray:
    """Unweighted signed contact terms of a relation at the given poses."""
    fa, fb = relation_features(relation, poses, classes, registry, table)
    if relation.kind == RELATION_P2P:
        return p2p_terms(fa, fb)
    if relation.kind == RELATION_P2C:
        return p2c_terms(fa, fb)
    return np.array([c2c_term(fa, fb)])


def contact_distance(relation: ContactRelation, residuals: np.ndarray) -> float:
    """The distance term of a relation's residual vector, in meters."""
    return float(abs(residuals[-1]))
