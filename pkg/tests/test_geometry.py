"""Tests for poses, primitives and surface features."""

import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from geofusion.exceptions import ConfigError
from geofusion.geometry import (
    BOX_BOTTOM_FACE,
    BOX_TOP_FACE,
    CYLINDER_BOTTOM_FACE,
    CYLINDER_SIDE,
    CurvedFeature,
    ModelRegistry,
    PlaneFeature,
    Pose,
    look_at,
    make_model,
    matrix_to_quat,
    quat_multiply,
    relative,
    so3_exp,
    so3_log,
    so3_right_jacobian_inv,
    table_feature,
    transform_feature,
)


def test_compose_with_inverse_is_identity(rng, random_pose):
    for _ in range(20):
        p = random_pose(rng, rot=3.0)
        assert p.compose(p.inverse()).is_close(Pose.identity(), 1e-12)
        assert p.inverse().compose(p).is_close(Pose.identity(), 1e-12)


def test_relative_recovers_target(rng, random_pose):
    a, b = random_pose(rng), random_pose(rng)
    assert a.compose(relative(a, b)).is_close(b, 1e-12)


def test_is_close_defaults_to_a_tight_tolerance():
    pose = Pose.from_rotvec([0.1, -0.2, 0.3], [0.4, 0.5, 0.6])
    assert pose.is_close(Pose(pose.q, pose.t + [1e-10, 0.0, 0.0]))
    assert not pose.is_close(Pose(pose.q, pose.t + [1e-6, 0.0, 0.0]))
    assert pose.is_close(Pose(pose.q, pose.t + [1e-6, 0.0, 0.0]), 1e-5)


def test_quaternion_is_canonical(rng, random_pose):
    for _ in range(20):
        p = random_pose(rng, rot=3.1)
        assert p.q[0] >= 0.0
        assert np.linalg.norm(p.q) == pytest.approx(1.0)


def test_log_inverts_exp_below_pi(rng):
    for _ in range(20):
        axis = rng.normal(size=3)
        phi = axis / np.linalg.norm(axis) * rng.uniform(0.0, 3.0)
        np.testing.assert_allclose(so3_log(so3_exp(phi)), phi, atol=1e-12)


def test_matrix_to_quat_agrees_with_scipy(rng):
    for _ in range(20):
        rot = Rotation.random(random_state=int(rng.integers(1 << 30)))
        x, y, z, w = rot.as_quat()
        expected = np.array([w, x, y, z]) * (1.0 if w >= 0.0 else -1.0)
        np.testing.assert_allclose(matrix_to_quat(rot.as_matrix()), expected, atol=1e-12)


def test_right_jacobian_inverse_linearizes_log(rng):
    phi = np.array([0.4, -0.9, 0.3])
    delta = 1e-6 * rng.normal(size=3)
    moved = so3_log(quat_multiply(so3_exp(phi), so3_exp(delta)))
    np.testing.assert_allclose(moved, phi + so3_right_jacobian_inv(phi) @ delta, atol=1e-11)


def test_retract_is_right_perturbation():
    p = Pose.from_rotvec([0.0, 0.0, math.pi / 2], [1.0, 0.0, 0.0])
    moved = p.retract(np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
    # body x maps to world y after the quarter turn
    np.testing.assert_allclose(moved.t, [1.0, 1.0, 0.0], atol=1e-12)


def test_look_at_points_optical_axis_at_target():
    eye, target = np.array([0.9, -0.2, 0.55]), np.array([0.0, 0.0, 0.05])
    pose = look_at(eye, target)
    forward = (target - eye) / np.linalg.norm(target - eye)
    np.testing.assert_allclose(pose.rotation[:, 2], forward, atol=1e-12)
    # image y points down in the world
    assert pose.rotation[2, 1] < 0.0


def test_box_signed_distance():
    model = make_model(99, "cube", "box", (0.1, 0.1, 0.1))
    assert np.abs(model.signed_distance(model.surface_points)).max() < 1e-12
    assert model.signed_distance(np.zeros(3))[0] == pytest.approx(-0.05)
    assert model.signed_distance([[0.15, 0.0, 0.0]])[0] == pytest.approx(0.1)


def test_cylinder_signed_distance_and_symmetry():
    model = make_model(98, "can", "cylinder", (0.03, 0.1))
    assert np.abs(model.signed_distance(model.surface_points)).max() < 1e-12
    np.testing.assert_allclose(model.symmetry_axis, [0.0, 0.0, 1.0])
    np.testing.assert_allclose(model.half_extents, [0.03, 0.03, 0.05])


def test_surface_sampling_respects_spacing():
    model = make_model(99, "cube", "box", (0.1, 0.1, 0.1), spacing=0.01)
    # six faces of 11 x 11 grid points
    assert len(model.surface_points) == 6 * 11 * 11


@pytest.mark.parametrize(
    "shape, dims",
    [("box", (0.1, 0.1)), ("cylinder", (0.1,)), ("sphere", (0.1,)), ("box", (0.1, -0.1, 0.1))],
)
def test_make_model_rejects_bad_dims(shape, dims):
    with pytest.raises(ConfigError):
        make_model(5, "bad", shape, dims)


def test_registry_rejects_duplicates():
    cube = make_model(1, "cube", "box", (0.1, 0.1, 0.1))
    with pytest.raises(ConfigError):
        ModelRegistry([cube, cube])


def test_registry_save_and_load(tmp_path, registry):
    path = tmp_path / "models.json"
    registry.save(path)
    loaded = ModelRegistry.load(path)
    assert loaded.class_ids == registry.class_ids
    assert loaded[1].dims == pytest.approx([0.16, 0.06, 0.21])
    assert loaded[3].shape_name == "cylinder"


def test_registry_rejects_unknown_schema():
    with pytest.raises(ConfigError):
        ModelRegistry.from_dict({"schema": "other/1", "models": []})


def test_box_features(registry):
    features = registry.features(1)
    assert len(features) == 18
    assert all(isinstance(f, PlaneFeature) for f in features[:6])
    assert all(isinstance(f, CurvedFeature) and f.radius == 0.0 for f in features[6:])
    np.testing.assert_allclose(features[BOX_TOP_FACE].normal, [0.0, 0.0, 1.0])
    np.testing.assert_allclose(features[BOX_BOTTOM_FACE].center, [0.0, 0.0, -0.105])
    for face in features[:6]:
        # boundary corners lie in the face plane
        np.testing.assert_allclose((face.boundary - face.center) @ face.normal, 0.0, atol=1e-12)


def test_cylinder_features(registry):
    features = registry.features(3)
    assert len(features) == 3
    np.testing.assert_allclose(features[CYLINDER_BOTTOM_FACE].normal, [0.0, 0.0, -1.0])
    side = features[CYLINDER_SIDE]
    assert side.radius == pytest.approx(0.033)
    np.testing.assert_allclose(side.axis, [0.0, 0.0, 1.0])


def test_transform_feature_moves_points_and_rotates_directions():
    pose = Pose.from_rotvec([math.pi / 2, 0.0, 0.0], [0.0, 0.0, 1.0])
    moved = transform_feature(table_feature((1.0, 1.0)), pose)
    np.testing.assert_allclose(moved.center, [0.0, 0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(moved.normal, [0.0, -1.0, 0.0], atol=1e-12)


def test_pose_dict_keeps_values(random_pose, rng):
    pose = random_pose(rng)
    assert Pose.from_dict(pose.to_dict()).is_close(pose, 1e-12)
