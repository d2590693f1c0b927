"""Shared fixtures for the GeoFusion tests."""

from __future__ import annotations

from typing import Callable

import numpy as np
import pytest

from geofusion.const import RELATION_P2P, TABLE_ID
from geofusion.geometry import BOX_BOTTOM_FACE, TABLE_FACE, ModelRegistry, Pose
from geofusion.relations import ContactRelation
from geofusion.scene_sim import (
    GroundTruthScene,
    Intrinsics,
    NoiseSpec,
    SceneObject,
    SimulatedDataset,
    emit_measurements,
    emit_odometry,
    orbit_trajectory,
    render_depth,
)

CRACKER_BOX = 1
MASTER_CHEF_CAN = 7
WOOD_BLOCK = 9


def build_dataset(
    registry: ModelRegistry,
    scene: GroundTruthScene,
    n_frames: int,
    noise: NoiseSpec,
    intrinsics: Intrinsics,
) -> SimulatedDataset:
    trajectory = orbit_trajectory(n_frames)
    frames = [render_depth(scene, pose, intrinsics, registry, t=i) for i, pose in enumerate(trajectory)]
    rng = np.random.default_rng(noise.rng_seed)
    measurements = [emit_measurements(scene, frame, noise, rng, registry) for frame in frames]
    odometry = emit_odometry(trajectory, noise, rng)
    return SimulatedDataset(scene, trajectory, frames, measurements, odometry, noise, registry, 0)


@pytest.fixture(scope="session")
def registry() -> ModelRegistry:
    return ModelRegistry.default()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def random_pose() -> Callable[..., Pose]:
    def _sample(rng: np.random.Generator, rot: float = 0.8, trans: float = 1.0) -> Pose:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        return Pose.from_rotvec(direction * rng.uniform(0.0, rot), rng.normal(0.0, trans, size=3))

    return _sample


@pytest.fixture(scope="session")
def small_intrinsics() -> Intrinsics:
    return Intrinsics(fx=262.5, fy=262.5, cx=159.5, cy=119.5, width=320, height=240)


@pytest.fixture(scope="session")
def box_scene() -> GroundTruthScene:
    """A single cracker box standing at the table center."""
    pose = Pose.from_rotvec([0.0, 0.0, 0.3], [0.0, 0.0, 0.105])
    return GroundTruthScene(
        [SceneObject(1, CRACKER_BOX, pose)],
        contacts=[ContactRelation(RELATION_P2P, TABLE_ID, 1, TABLE_FACE, BOX_BOTTOM_FACE)],
    )


@pytest.fixture(scope="session")
def noiseless_dataset(registry, box_scene, small_intrinsics) -> SimulatedDataset:
    return build_dataset(registry, box_scene, 6, NoiseSpec.noiseless(), small_intrinsics)


@pytest.fixture(scope="session")
def three_object_scene() -> GroundTruthScene:
    """A box, a can and a block standing apart on the table."""
    return GroundTruthScene(
        [
            SceneObject(1, CRACKER_BOX, Pose.from_rotvec([0.0, 0.0, 0.5], [-0.25, 0.0, 0.105])),
            SceneObject(2, MASTER_CHEF_CAN, Pose(t=[0.25, 0.1, 0.0695])),
            SceneObject(3, WOOD_BLOCK, Pose.from_rotvec([0.0, 0.0, -0.3], [0.05, -0.25, 0.1])),
        ]
    )


@pytest.fixture(scope="session")
def noisy_dataset(registry, three_object_scene, small_intrinsics) -> SimulatedDataset:
    """Default pose and odometry noise, every object detected, nothing spurious."""
    noise = NoiseSpec(false_positive_rate=0.0, miss_rate=0.0, class_confusion_rate=0.0, rng_seed=5)
    return build_dataset(registry, three_object_scene, 6, noise, small_intrinsics)


@pytest.fixture(scope="session")
def cluttered_dataset(registry, three_object_scene, small_intrinsics) -> SimulatedDataset:
    """Default noise with two spurious detections per frame on average."""
    noise = NoiseSpec(false_positive_rate=2.0, miss_rate=0.0, class_confusion_rate=0.0, rng_seed=9)
    return build_dataset(registry, three_object_scene, 6, noise, small_intrinsics)
