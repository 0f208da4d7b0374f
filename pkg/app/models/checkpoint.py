"""Parameter checkpoints: a JSON manifest followed by little-endian float32 tensors."""

import json
import logging
import os
import struct
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from app.core.errors import DataError
from app.models.nn import LayerSpec, ParameterSet

logger = logging.getLogger(__name__)

MAGIC = b"DFKITCK1"
VERSION = 1


class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    trainable: bool = True


class CheckpointManifest(BaseModel):
    version: int = VERSION
    seed: int = 0
    step: int = 0
    layers: List[LayerSpec] = Field(default_factory=list)
    tensors: List[TensorEntry] = Field(default_factory=list)
    # resolved model/filter configuration the parameters were trained under
    config: Dict[str, Any] = Field(default_factory=dict)


def save_checkpoint(path: str, params: ParameterSet, layers: List[LayerSpec], seed: int = 0,
                    step: int = 0, config: Optional[Dict[str, Any]] = None) -> CheckpointManifest:
    manifest = CheckpointManifest(
        seed=seed,
        step=step,
        layers=layers,
        tensors=[TensorEntry(name=n, shape=list(v.shape), trainable=n not in params.frozen)
                 for n, v in params.values.items()],
        config=config or {},
    )
    header = manifest.model_dump_json().encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for value in params.values.values():
            f.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    logger.info(f"checkpoint written to {path} ({len(params)} tensors, step {step})")
    return manifest


def load_checkpoint(path: str) -> Tuple[CheckpointManifest, ParameterSet]:
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise DataError(f"{path} is not a checkpoint file")
    (length,) = struct.unpack("<I", blob[8:12])
    try:
        manifest = CheckpointManifest.model_validate(json.loads(blob[12:12 + length].decode("utf-8")))
    except (ValueError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: corrupt checkpoint manifest: {e}") from e
    if manifest.version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {manifest.version}")
    params = ParameterSet()
    offset = 12 + length
    for entry in manifest.tensors:
        count = int(np.prod(entry.shape)) if entry.shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise DataError(f"{path}: truncated at tensor '{entry.name}'")
        value = np.frombuffer(blob[offset:end], dtype="<f4").reshape(entry.shape)
        params.add(entry.name, value.astype(np.float64), trainable=entry.trainable)
        offset = end
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes after the last tensor")
    return manifest, params
