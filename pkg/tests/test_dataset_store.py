import os

import numpy as np
import pytest

from app.core.errors import DataError
from app.services.dataset_store import DatasetManifest, DatasetReader, read_split, write_split
from app.services.discworld import NoiseRegime, simulate_sequence


def test_split_round_trip(tiny_dataset):
    manifest, records = read_split(os.path.join(tiny_dataset, "train.dfds"))
    assert manifest.count == 4
    assert manifest.length == 6
    assert manifest.image_size == 16
    assert len(records) == 4
    original = simulate_sequence(manifest.scene, manifest.regime, 6, seed=3, index=2, split="train")
    np.testing.assert_array_equal(records[2].states, original.states)
    np.testing.assert_array_equal(records[2].images, original.images)
    np.testing.assert_array_equal(records[2].visible_pixels, original.visible_pixels)


def test_read_limit(tiny_dataset):
    _, records = read_split(os.path.join(tiny_dataset, "val.dfds"), limit=1)
    assert len(records) == 1
    assert records[0].split == "val"


def test_reader_random_access(tiny_dataset):
    reader = DatasetReader(os.path.join(tiny_dataset, "test.dfds"))
    assert len(reader) == 2
    assert [r.index for r in reader] == [0, 1]
    with pytest.raises(IndexError):
        reader[2]


def test_truncated_file_is_a_data_error(tiny_dataset, tmp_path):
    blob = open(os.path.join(tiny_dataset, "train.dfds"), "rb").read()
    cut = tmp_path / "cut.dfds"
    cut.write_bytes(blob[:-10])
    with pytest.raises(DataError, match="truncated"):
        DatasetReader(str(cut))
    padded = tmp_path / "padded.dfds"
    padded.write_bytes(blob + b"\x01")
    with pytest.raises(DataError):
        DatasetReader(str(padded))


def test_foreign_and_missing_files(tmp_path):
    foreign = tmp_path / "foreign.dfds"
    foreign.write_bytes(b"PK\x03\x04 not a dataset")
    with pytest.raises(DataError):
        DatasetReader(str(foreign))
    with pytest.raises(DataError):
        DatasetReader(str(tmp_path / "missing.dfds"))


def test_manifest_count_must_match(tmp_path, tiny_scene):
    record = simulate_sequence(tiny_scene, NoiseRegime(), 2, seed=0)
    manifest = DatasetManifest(count=2, length=2, image_size=16, regime=NoiseRegime(), scene=tiny_scene, seed=0)
    with pytest.raises(DataError):
        write_split(str(tmp_path / "x.dfds"), manifest, [record])
