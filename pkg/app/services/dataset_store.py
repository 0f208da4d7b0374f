"""Dataset container: one file per split.

Layout: b"DFKITDS1", uint32 manifest length, UTF-8 JSON manifest, then per sequence three
length-prefixed fields (uint32 byte counts): states as float32, images as raw RGB bytes,
visible_pixels as uint16. All integers and floats little-endian.
"""

import json
import logging
import os
import struct
from typing import Iterator, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from app.core.errors import DataError
from app.services.discworld import NoiseRegime, SceneSpec, SequenceRecord

logger = logging.getLogger(__name__)

MAGIC = b"DFKITDS1"
VERSION = 1


class DatasetManifest(BaseModel):
    version: int = VERSION
    task: str = "disc-tracking"
    split: str = "train"
    count: int
    length: int
    image_size: int
    regime: NoiseRegime
    scene: SceneSpec
    seed: int


def _field(blob: bytes) -> bytes:
    return struct.pack("<I", len(blob)) + blob


def write_split(path: str, manifest: DatasetManifest, records: List[SequenceRecord]) -> None:
    if len(records) != manifest.count:
        raise DataError(f"manifest announces {manifest.count} sequences, got {len(records)}")
    header = manifest.model_dump_json().encode("utf-8")
    tmp = path + ".part"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for rec in records:
            if np.any(rec.visible_pixels > np.iinfo(np.uint16).max):
                raise DataError("visible pixel count does not fit 16 bits")
            f.write(_field(np.ascontiguousarray(rec.states, dtype="<f4").tobytes()))
            f.write(_field(np.ascontiguousarray(rec.images, dtype=np.uint8).tobytes()))
            f.write(_field(np.ascontiguousarray(rec.visible_pixels, dtype="<u2").tobytes()))
    os.replace(tmp, path)
    logger.info(f"wrote {manifest.count} sequences to {path}")


class DatasetReader:
    """Random access to the sequences of one split file."""

    def __init__(self, path: str):
        if not os.path.exists(path):
            raise DataError(f"dataset file not found: {path}")
        self.path = path
        with open(path, "rb") as f:
            if f.read(8) != MAGIC:
                raise DataError(f"{path} is not a dataset container")
            raw = f.read(4)
            if len(raw) != 4:
                raise DataError(f"{path}: truncated header")
            (length,) = struct.unpack("<I", raw)
            try:
                self.manifest = DatasetManifest.model_validate(json.loads(f.read(length).decode("utf-8")))
            except (ValueError, UnicodeDecodeError) as e:
                raise DataError(f"{path}: corrupt manifest: {e}") from e
            if self.manifest.version != VERSION:
                raise DataError(f"{path}: unsupported container version {self.manifest.version}")
            self._offsets = self._scan(f)

    def _scan(self, f) -> List[int]:
        offsets = []
        for i in range(self.manifest.count):
            offsets.append(f.tell())
            for _ in range(3):
                raw = f.read(4)
                if len(raw) != 4:
                    raise DataError(f"{self.path}: truncated at sequence {i}")
                (n,) = struct.unpack("<I", raw)
                f.seek(n, os.SEEK_CUR)
        end = f.tell()
        if end != os.path.getsize(self.path):
            raise DataError(f"{self.path}: truncated or trailing data after {self.manifest.count} sequences")
        return offsets

    def __len__(self) -> int:
        return self.manifest.count

    def __getitem__(self, index: int) -> SequenceRecord:
        if not 0 <= index < len(self):
            raise IndexError(index)
        m = self.manifest
        with open(self.path, "rb") as f:
            f.seek(self._offsets[index])
            fields = []
            for _ in range(3):
                (n,) = struct.unpack("<I", f.read(4))
                fields.append(f.read(n))
        size = m.image_size
        try:
            states = np.frombuffer(fields[0], dtype="<f4").reshape(m.length + 1, 4).astype(np.float64)
            images = np.frombuffer(fields[1], dtype=np.uint8).reshape(m.length, size, size, 3)
            visible = np.frombuffer(fields[2], dtype="<u2").astype(np.int64)
        except ValueError as e:
            raise DataError(f"{self.path}: sequence {index} does not match the manifest: {e}") from e
        return SequenceRecord(states=states, images=images, visible_pixels=visible, scene=m.scene,
                              regime=m.regime, seed=m.seed, index=index, split=m.split)

    def __iter__(self) -> Iterator[SequenceRecord]:
        for i in range(len(self)):
            yield self[i]


def read_split(path: str, limit: Optional[int] = None) -> Tuple[DatasetManifest, List[SequenceRecord]]:
    reader = DatasetReader(path)
    count = len(reader) if limit is None else min(limit, len(reader))
    return reader.manifest, [reader[i] for i in range(count)]
