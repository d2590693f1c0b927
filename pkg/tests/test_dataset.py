"""Tests for the on-disk dataset layout."""

import json

import numpy as np
import pytest

from geofusion.dataset import read_dataset, write_dataset
from geofusion.exceptions import DatasetError


def test_written_dataset_reads_back(tmp_path, noiseless_dataset):
    path = write_dataset(noiseless_dataset, tmp_path / "ds")
    loaded = read_dataset(path)

    assert len(loaded.frames) == len(noiseless_dataset.frames)
    assert loaded.anchor.is_close(noiseless_dataset.anchor, 1e-12)
    assert loaded.registry.class_ids == noiseless_dataset.registry.class_ids
    assert [o.object_id for o in loaded.scene.objects] == [1]
    assert loaded.scene.contacts == noiseless_dataset.scene.contacts
    frame = loaded.frames[3]
    np.testing.assert_array_equal(frame.depth, noiseless_dataset.frames[3].depth)
    np.testing.assert_array_equal(frame.labels, noiseless_dataset.frames[3].labels)
    for got, want in zip(loaded.measurements[3], noiseless_dataset.measurements[3]):
        assert got.class_id == want.class_id
        assert got.pose.is_close(want.pose, 1e-12)
    assert len(loaded.odometry) == len(noiseless_dataset.odometry)


def test_rewrite_is_byte_identical(tmp_path, noiseless_dataset):
    first = write_dataset(noiseless_dataset, tmp_path / "a")
    second = write_dataset(noiseless_dataset, tmp_path / "b")
    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(second) for p in second.rglob("*") if p.is_file())
    for rel in files:
        assert (first / rel).read_bytes() == (second / rel).read_bytes()


def test_missing_directory(tmp_path):
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "nope")


def test_schema_mismatch(tmp_path, noiseless_dataset):
    path = write_dataset(noiseless_dataset, tmp_path / "ds")
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["schema"] = "geofuse-dataset/0"
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DatasetError):
        read_dataset(path)


def test_truncated_depth_image(tmp_path, noiseless_dataset):
    path = write_dataset(noiseless_dataset, tmp_path / "ds")
    depth = path / "frames" / "0002.depth"
    depth.write_bytes(depth.read_bytes()[:100])
    loaded = read_dataset(path)
    with pytest.raises(DatasetError):
        loaded.frames[2]


def test_missing_measurement_file(tmp_path, noiseless_dataset):
    path = write_dataset(noiseless_dataset, tmp_path / "ds")
    (path / "frames" / "0001.meas.json").unlink()
    with pytest.raises(DatasetError):
        read_dataset(path)
