"""Tests for contact predicates and relation inference."""

from dataclasses import dataclass

import numpy as np
import pytest

from geofusion.const import RELATION_C2C, RELATION_P2C, RELATION_P2P, TABLE_ID
from geofusion.exceptions import ConfigError, DegenerateAxes
from geofusion.geometry import (
    BOX_BOTTOM_FACE,
    BOX_TOP_FACE,
    CYLINDER_SIDE,
    CurvedFeature,
    ModelRegistry,
    PlaneFeature,
    Pose,
    make_model,
    table_feature,
)
from geofusion.relations import (
    ContactRelation,
    RelationConfig,
    c2c_term,
    check_c2c,
    check_p2c,
    check_p2p,
    convex_footprint,
    infer_relations,
    interpenetration,
    polygons_overlap,
    projection_overlap_check,
    relation_residuals,
    support_direction_check,
)
from geofusion.scene_sim import generate_scene

CFG = RelationConfig()
TABLE = table_feature((1.2, 0.8))


@dataclass
class Entry:
    id: int
    class_id: int
    pose: Pose


def _square(z, normal_sign=1.0, half=0.05, offset=(0.0, 0.0)):
    ox, oy = offset
    corners = [(half, half), (-half, half), (-half, -half), (half, -half)]
    boundary = np.array([[ox + dx, oy + dy, z] for dx, dy in corners])
    return PlaneFeature(np.array([ox, oy, z]), boundary, np.array([0.0, 0.0, normal_sign]))


def _edge(axis, center, radius=0.0, half=0.05):
    axis = np.asarray(axis, dtype=float)
    center = np.asarray(center, dtype=float)
    return CurvedFeature(center, axis, np.array([center - half * axis, center + half * axis]), radius)


def test_relation_config_validation():
    with pytest.raises(ConfigError):
        RelationConfig(eps_G=1.0)
    with pytest.raises(ConfigError):
        RelationConfig(gravity=(0.0, 0.0, 0.0))
    assert RelationConfig(gravity=(0.0, 0.0, -9.81)).gravity == pytest.approx((0.0, 0.0, -1.0))


def test_relation_rejects_self_contact():
    with pytest.raises(ConfigError):
        ContactRelation(RELATION_P2P, 3, 3, 0, 1)
    with pytest.raises(ConfigError):
        ContactRelation("X2Y", 1, 2, 0, 1)


def test_relation_key_ignores_sides():
    a = ContactRelation(RELATION_P2P, 1, 2, BOX_TOP_FACE, BOX_BOTTOM_FACE)
    b = ContactRelation(RELATION_P2P, 2, 1, BOX_BOTTOM_FACE, BOX_TOP_FACE)
    assert a.key == b.key


def test_check_p2p():
    assert check_p2p(_square(0.0), _square(0.005, -1.0), CFG)
    assert not check_p2p(_square(0.0), _square(0.02, -1.0), CFG)
    assert not check_p2p(_square(0.0), _square(0.0, 1.0), CFG)


def test_check_p2c():
    assert check_p2c(_square(0.0), _edge([1, 0, 0], [0, 0, 0.033], radius=0.033), CFG)
    assert not check_p2c(_square(0.0), _edge([0, 0, 1], [0, 0, 0.033], radius=0.033), CFG)
    assert not check_p2c(_square(0.0), _edge([1, 0, 0], [0, 0, 0.05], radius=0.033), CFG)


def test_check_c2c():
    assert check_c2c(_edge([1, 0, 0], [0, 0, 0]), _edge([0, 1, 0], [0, 0, 0.004]), CFG)
    assert not check_c2c(_edge([1, 0, 0], [0, 0, 0]), _edge([0, 1, 0], [0, 0, 0.02]), CFG)
    assert c2c_term(_edge([1, 0, 0], [0, 0, 0], 0.01), _edge([0, 1, 0], [0, 0, 0.03], 0.01)) == pytest.approx(0.01)
    with pytest.raises(DegenerateAxes):
        check_c2c(_edge([1, 0, 0], [0, 0, 0]), _edge([1, 0, 0], [0, 0, 0.001]), CFG)


def test_support_direction_check():
    assert support_direction_check(_square(0.0), CFG)
    wall = PlaneFeature(np.zeros(3), np.zeros((4, 3)), np.array([1.0, 0.0, 0.0]))
    assert not support_direction_check(wall, CFG)


def test_polygons_overlap():
    square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    assert polygons_overlap(square, square + 0.5)
    assert polygons_overlap(square, square + [1.0, 0.0])
    assert not polygons_overlap(square, square + [1.1, 0.0])
    diamond = np.array([[0.0, -0.5], [0.5, 0.0], [0.0, 0.5], [-0.5, 0.0]]) + [1.6, 1.6]
    assert not polygons_overlap(square, diamond)


def _random_convex_polygon(rng):
    """Counter-clockwise vertices on a circle of random center and radius."""
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=int(rng.integers(3, 9))))
    center = rng.uniform(-0.6, 0.6, size=2)
    return center + rng.uniform(0.1, 0.5) * np.column_stack((np.cos(angles), np.sin(angles)))


def _outside_distance(polygon, points):
    """Signed distance to a counter-clockwise convex polygon, underestimated outside near corners."""
    edges = np.roll(polygon, -1, axis=0) - polygon
    normals = np.column_stack((edges[:, 1], -edges[:, 0]))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    offsets = np.einsum("ij,ij->i", normals, polygon)
    return (points @ normals.T - offsets).max(axis=1)


def _boundary_samples(polygon, spacing):
    chunks = []
    for a, b in zip(polygon, np.roll(polygon, -1, axis=0)):
        count = max(2, int(np.ceil(np.linalg.norm(b - a) / spacing)) + 1)
        chunks.append(a + np.linspace(0.0, 1.0, count)[:, None] * (b - a))
    return np.vstack(chunks)


def _flat_face(polygon, z, normal_sign):
    boundary = np.column_stack((polygon, np.full(len(polygon), z)))
    return PlaneFeature(boundary.mean(axis=0), boundary, np.array([0.0, 0.0, normal_sign]))


def test_shadow_overlap_agrees_with_boundary_sampling():
    rng = np.random.default_rng(11)
    spacing = 0.005
    overlapping = separated = 0
    for _ in range(1000):
        pa, pb = _random_convex_polygon(rng), _random_convex_polygon(rng)
        depth = min(
            _outside_distance(pb, _boundary_samples(pa, spacing)).min(),
            _outside_distance(pa, _boundary_samples(pb, spacing)).min(),
        )
        fa, fb = _flat_face(pa, rng.uniform(-1.0, 1.0), 1.0), _flat_face(pb, rng.uniform(-1.0, 1.0), -1.0)
        # within one sample spacing of touching the sampled answer is ambiguous
        if depth < -spacing:
            assert polygons_overlap(pa, pb) and polygons_overlap(pb, pa)
            assert projection_overlap_check(fa, fb) and projection_overlap_check(fb, fa)
            overlapping += 1
        elif depth > spacing:
            assert not polygons_overlap(pa, pb) and not polygons_overlap(pb, pa)
            assert not projection_overlap_check(fa, fb) and not projection_overlap_check(fb, fa)
            separated += 1
    assert overlapping > 100
    assert separated > 100


def test_convex_footprint_collapses_degenerate_input():
    assert len(convex_footprint(np.array([[0.0, 0.0], [0.0, 0.0]]))) == 1
    segment = convex_footprint(np.array([[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]]))
    assert len(segment) == 2


def test_projection_overlap_check():
    assert projection_overlap_check(_square(0.0), _square(0.1, -1.0, offset=(0.08, 0.0)))
    assert not projection_overlap_check(_square(0.0), _square(0.1, -1.0, offset=(0.2, 0.0)))
    # a horizontal edge projects to a segment
    assert projection_overlap_check(_square(0.0), _edge([1, 0, 0], [0.0, 0.0, 0.2]))


def test_box_on_table_and_stacked_box(registry):
    lower = Entry(1, 1, Pose.from_rotvec([0.0, 0.0, 0.4], [0.0, 0.0, 0.105]))
    upper = Entry(2, 10, lower.pose.compose(Pose(t=[0.02, 0.0, 0.105 + 0.025])))
    relations = infer_relations([upper, lower], TABLE, registry, CFG)
    keys = {r.key for r in relations}
    assert ContactRelation(RELATION_P2P, TABLE_ID, 1, 0, BOX_BOTTOM_FACE).key in keys
    assert ContactRelation(RELATION_P2P, 1, 2, BOX_TOP_FACE, BOX_BOTTOM_FACE).key in keys
    assert len(relations) == 2
    for relation in relations:
        assert relation.residuals == pytest.approx((0.0, 0.0), abs=1e-12)


def test_lying_cylinder_touches_table_along_its_side(registry):
    lying = Entry(1, 3, Pose.from_rotvec([np.pi / 2, 0.0, 0.0], [0.1, 0.1, 0.033]))
    relations = infer_relations([lying], TABLE, registry, CFG)
    assert [(r.kind, r.obj_a, r.feat_a, r.feat_b) for r in relations] == [(RELATION_P2C, TABLE_ID, 0, CYLINDER_SIDE)]


def test_floating_object_has_no_contact(registry):
    floating = Entry(1, 1, Pose(t=[0.0, 0.0, 0.105 + 0.02]))
    assert infer_relations([floating], TABLE, registry, CFG) == []


def test_crossed_edges_form_c2c(registry):
    bar = make_model(1, "bar", "box", (0.2, 0.02, 0.02))
    bars = ModelRegistry([bar])
    lower = Entry(1, 1, Pose.from_rotvec([np.pi / 4, 0.0, 0.0], [0.0, 0.0, 0.1]))
    upper = Entry(2, 1, Pose.from_rotvec([0.0, 0.0, np.pi / 2]).compose(Pose.from_rotvec([np.pi / 4, 0.0, 0.0])))
    upper.pose = Pose(upper.pose.q, [0.0, 0.0, 0.1 + 2.0 * 0.01 * np.sqrt(2.0)])
    relations = infer_relations([lower, upper], None, bars, CFG)
    assert relations
    assert {r.kind for r in relations} == {RELATION_C2C}


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_inference_recovers_generator_contacts(registry, seed):
    scene = generate_scene(6, registry, seed)
    inferred = {r.key for r in infer_relations(scene.objects, scene.table, registry, CFG)}
    for contact in scene.contacts:
        assert contact.key in inferred


def test_relation_residuals_measure_gap(registry):
    relation = ContactRelation(RELATION_P2P, TABLE_ID, 1, 0, BOX_BOTTOM_FACE)
    residuals = relation_residuals(relation, {1: Pose(t=[0.0, 0.0, 0.11])}, {1: 1}, registry, TABLE)
    assert residuals == pytest.approx([0.0, 0.005])


def test_interpenetration_depth():
    cube = make_model(99, "cube", "box", (0.1, 0.1, 0.1))
    assert interpenetration(cube, Pose.identity(), cube, Pose(t=[0.08, 0.0, 0.0])) == pytest.approx(0.02)
    assert interpenetration(cube, Pose.identity(), cube, Pose(t=[0.12, 0.0, 0.0])) == 0.0
