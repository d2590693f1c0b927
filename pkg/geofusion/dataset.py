"""Reader and writer for the versioned on-disk dataset layout.

Layout of a dataset directory::

    manifest.json          schema, frame count, intrinsics, anchor pose, seed
    models.json            object model registry
    scene.json             ground-truth objects, table and generator contacts
    trajectory.json        ground-truth camera poses (evaluation only)
    odom.json              noisy relative motions, len = frames - 1
    noise.json             the NoiseSpec used to simulate
    frames/NNNN.depth      little-endian float32, row-major, meters (0 = no return)
    frames/NNNN.labels     little-endian int16, row-major, winning object id
    frames/NNNN.meas.json  semantic measurements of the frame
"""

from __future__ import annotations

from collections.abc import Sequence
import json
import logging
from pathlib import Path
from typing import Any, Iterator, overload

import numpy as np

from .const import DATASET_SCHEMA, DEFAULT_TABLE_EXTENTS
from .exceptions import DatasetError
from .geometry import ModelRegistry, Pose
from .relations import ContactRelation
from .scene_sim import (
    CameraFrame,
    GroundTruthScene,
    Intrinsics,
    NoiseSpec,
    SceneObject,
    SemanticMeasurement,
    SimulatedDataset,
)

_LOGGER = logging.getLogger(__name__)

_DEPTH_DTYPE = np.dtype("<f4")
_LABEL_DTYPE = np.dtype("<i2")
_FRAMES_DIR = "frames"


class DatasetCodec:
    """Encoders and decoders for every record stored in a dataset directory."""

    @staticmethod
    def encode_measurement(measurement: SemanticMeasurement) -> dict[str, Any]:
        return {
            "t": measurement.t,
            "class_id": measurement.class_id,
            "pose": measurement.pose.to_dict(),
            "confidence": measurement.confidence,
            "source_object": measurement.source_object,
        }

    @staticmethod
    def decode_measurement(data: dict[str, Any]) -> SemanticMeasurement:
        """Build a measurement from its JSON record.

        Raises:
            DatasetError: if a field is missing or out of range
        """
        try:
            confidence = float(data["confidence"])
            if not 0.0 <= confidence <= 1.0:
                raise ValueError(f"confidence {confidence} outside [0, 1]")
            return SemanticMeasurement(
                int(data["t"]),
                int(data["class_id"]),
                Pose.from_dict(data["pose"]),
                confidence,
                int(data.get("source_object", -1)),
            )
        except (KeyError, TypeError, ValueError) as err:
            raise DatasetError(f"Malformed measurement record: {err}") from err

    @staticmethod
    def encode_scene(scene: GroundTruthScene) -> dict[str, Any]:
        return {
            "schema": DATASET_SCHEMA,
            "objects": [
                {"id": obj.object_id, "class_id": obj.class_id, "pose": obj.pose.to_dict()} for obj in scene.objects
            ],
            "table": {"extents": list(scene.table_extents)},
            "gravity": [float(v) for v in scene.gravity],
            "contacts": [relation.to_dict() for relation in scene.contacts],
        }

    @staticmethod
    def decode_scene(data: dict[str, Any]) -> GroundTruthScene:
        try:
            objects = [
                SceneObject(int(obj["id"]), int(obj["class_id"]), Pose.from_dict(obj["pose"]))
                for obj in data["objects"]
            ]
            extents = tuple(float(v) for v in data.get("table", {}).get("extents", DEFAULT_TABLE_EXTENTS))
            contacts = [ContactRelation.from_dict(c) for c in data.get("contacts", [])]
            return GroundTruthScene(objects, extents, np.asarray(data["gravity"], dtype=float), contacts)
        except (KeyError, TypeError, ValueError) as err:
            raise DatasetError(f"Malformed scene.json: {err}") from err

    @staticmethod
    def encode_noise(noise: NoiseSpec) -> dict[str, Any]:
        return {"schema": DATASET_SCHEMA, **noise.to_dict()}

    @staticmethod
    def decode_noise(data: dict[str, Any]) -> NoiseSpec:
        try:
            return NoiseSpec(
                tuple(data["odom_sigma"]),
                tuple(data["meas_sigma"]),
                float(data["false_positive_rate"]),
                float(data["miss_rate"]),
                float(data["class_confusion_rate"]),
                int(data["rng_seed"]),
                tuple(data.get("confidence_true", (0.5, 1.0))),
                tuple(data.get("confidence_false", (0.5, 1.0))),
            )
        except (KeyError, TypeError, ValueError) as err:
            raise DatasetError(f"Malformed noise.json: {err}") from err

    @staticmethod
    def encode_image(image: np.ndarray, dtype: np.dtype) -> bytes:
        """Row-major little-endian bytes of an image."""
        return np.ascontiguousarray(image, dtype=dtype).tobytes(order="C")

    @staticmethod
    def decode_image(payload: bytes, intrinsics: Intrinsics, dtype: np.dtype) -> np.ndarray:
        """Inverse of encode_image.

        Raises:
            DatasetError: if the payload size does not match the image size
        """
        expected = intrinsics.width * intrinsics.height * dtype.itemsize
        if len(payload) != expected:
            raise DatasetError(f"Image payload has {len(payload)} bytes, expected {expected}")
        return np.frombuffer(payload, dtype=dtype).reshape(intrinsics.height, intrinsics.width).copy()


def _frame_stem(t: int) -> str:
    return f"{t:04d}"


def _dump_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as err:
        raise DatasetError(f"Missing dataset file {path}") from err
    except json.JSONDecodeError as err:
        raise DatasetError(f"Invalid JSON in {path}: {err}") from err


def write_dataset(dataset: SimulatedDataset, path: Path) -> Path:
    """Write a simulated sequence to disk; reruns produce byte-identical files."""
    path = Path(path)
    frames_dir = path / _FRAMES_DIR
    frames_dir.mkdir(parents=True, exist_ok=True)
    intrinsics = dataset.frames[0].intrinsics if len(dataset.frames) else Intrinsics()

    _dump_json(
        path / "manifest.json",
        {
            "schema": DATASET_SCHEMA,
            "frames": len(dataset.frames),
            "objects": len(dataset.scene.objects),
            "intrinsics": intrinsics.to_dict(),
            "anchor": dataset.anchor.to_dict(),
            "seed": dataset.seed,
        },
    )
    dataset.registry.save(path / "models.json")
    _dump_json(path / "scene.json", DatasetCodec.encode_scene(dataset.scene))
    _dump_json(path / "trajectory.json", [pose.to_dict() for pose in dataset.trajectory])
    _dump_json(path / "odom.json", [pose.to_dict() for pose in dataset.odometry])
    _dump_json(path / "noise.json", DatasetCodec.encode_noise(dataset.noise))

    for frame, measurements in zip(dataset.frames, dataset.measurements):
        stem = _frame_stem(frame.t)
        (frames_dir / f"{stem}.depth").write_bytes(DatasetCodec.encode_image(frame.depth, _DEPTH_DTYPE))
        if frame.labels is not None:
            (frames_dir / f"{stem}.labels").write_bytes(DatasetCodec.encode_image(frame.labels, _LABEL_DTYPE))
        _dump_json(
            frames_dir / f"{stem}.meas.json",
            {
                "t": frame.t,
                "camera": frame.pose.to_dict(),
                "measurements": [DatasetCodec.encode_measurement(m) for m in measurements],
            },
        )
    _LOGGER.info("Wrote dataset with %d frames to %s", len(dataset.frames), path)
    return path


class FrameStore(Sequence):
    """Lazy, read-only sequence of the frames of a dataset directory."""

    def __init__(self, frames_dir: Path, trajectory: list[Pose], intrinsics: Intrinsics) -> None:
        self._dir = frames_dir
        self._trajectory = trajectory
        self._intrinsics = intrinsics

    def __len__(self) -> int:
        return len(self._trajectory)

    @overload
    def __getitem__(self, index: int) -> CameraFrame: ...

    @overload
    def __getitem__(self, index: slice) -> list[CameraFrame]: ...

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(index)
        stem = _frame_stem(index)
        try:
            depth = DatasetCodec.decode_image(
                (self._dir / f"{stem}.depth").read_bytes(), self._intrinsics, _DEPTH_DTYPE
            )
        except FileNotFoundError as err:
            raise DatasetError(f"Missing depth image for frame {index}") from err
        labels_path = self._dir / f"{stem}.labels"
        labels = (
            DatasetCodec.decode_image(labels_path.read_bytes(), self._intrinsics, _LABEL_DTYPE)
            if labels_path.exists()
            else None
        )
        return CameraFrame(index, self._trajectory[index], self._intrinsics, depth, labels)

    def __iter__(self) -> Iterator[CameraFrame]:
        for i in range(len(self)):
            yield self[i]


def read_dataset(path: Path) -> SimulatedDataset:
    """Open a dataset directory; depth images are read on access.

    Raises:
        DatasetError: if the directory is missing, the schema differs or a file is malformed
    """
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"Dataset directory {path} does not exist")
    manifest = _load_json(path / "manifest.json")
    if manifest.get("schema") != DATASET_SCHEMA:
        raise DatasetError(f"Unsupported dataset schema {manifest.get('schema')!r}, expected {DATASET_SCHEMA}")

    try:
        intrinsics = Intrinsics(**manifest["intrinsics"])
        n_frames = int(manifest["frames"])
    except (KeyError, TypeError) as err:
        raise DatasetError(f"Malformed manifest.json: {err}") from err

    registry = ModelRegistry.load(path / "models.json")
    scene = DatasetCodec.decode_scene(_load_json(path / "scene.json"))
    trajectory = [Pose.from_dict(p) for p in _load_json(path / "trajectory.json")]
    odometry = [Pose.from_dict(p) for p in _load_json(path / "odom.json")]
    noise = DatasetCodec.decode_noise(_load_json(path / "noise.json"))
    if len(trajectory) != n_frames:
        raise DatasetError(f"trajectory.json has {len(trajectory)} poses, manifest says {n_frames}")
    if n_frames > 1 and len(odometry) != n_frames - 1:
        raise DatasetError(f"odom.json has {len(odometry)} entries, expected {n_frames - 1}")

    frames_dir = path / _FRAMES_DIR
    measurements = []
    for t in range(n_frames):
        record = _load_json(frames_dir / f"{_frame_stem(t)}.meas.json")
        measurements.append([DatasetCodec.decode_measurement(m) for m in record.get("measurements", [])])

    _LOGGER.debug("Opened dataset %s with %d frames", path, n_frames)
    return SimulatedDataset(
        scene,
        trajectory,
        FrameStore(frames_dir, trajectory, intrinsics),
        measurements,
        odometry,
        noise,
        registry,
        int(manifest.get("seed", 0)),
    )
