"""Image sensor network: conv 9x9/2 (4) -> conv 9x9/2 (8) -> fc 16 -> fc 32 -> z and R heads."""

import logging
from dataclasses import dataclass
from typing import List, Mapping, Optional

import numpy as np
from pydantic import BaseModel, Field

from app.core import autodiff as ad
from app.core.autodiff import Tensor
from app.core.errors import ShapeError
from app.core.gaussian import CovMode, tri_size
from app.models.nn import ConvLayer, DenseLayer, LayerSpec, ParameterSet, init_params
from app.models.noise import NoiseModel

logger = logging.getLogger(__name__)


class SensorSpec(BaseModel):
    image_size: int = Field(default=100, ge=16)
    channels: int = 3
    obs_dim: int = 2
    conv_channels: List[int] = Field(default_factory=lambda: [4, 8])
    kernel: int = 9
    stride: int = 2
    fc: List[int] = Field(default_factory=lambda: [16, 32])
    r_shape: CovMode = "diagonal"

    @property
    def r_entries(self) -> int:
        return self.obs_dim if self.r_shape == "diagonal" else tri_size(self.obs_dim)


@dataclass
class SensorOutput:
    """Batched sensor results for T images."""

    z: Tensor          # (T, m)
    r_entries: Tensor  # (T, k) pre-bias R head output
    encoding: Tensor   # (T, fc[-1])


class SensorNet:
    def __init__(self, spec: SensorSpec):
        self.spec = spec
        specs: List[LayerSpec] = []
        size, chans = spec.image_size, spec.channels
        for i, c in enumerate(spec.conv_channels):
            specs.append(LayerSpec(name=f"sensor.conv{i + 1}", kind="conv", in_size=chans, out_size=c,
                                   kernel=spec.kernel, stride=spec.stride))
            size, chans = -(-size // spec.stride), c
        self.feature_shape = (size, size, chans)
        width = size * size * chans
        for i, units in enumerate(spec.fc):
            specs.append(LayerSpec(name=f"sensor.fc{i + 1}", in_size=width, out_size=units))
            width = units
        specs.append(LayerSpec(name="sensor.z", in_size=width, out_size=spec.obs_dim, activation="none"))
        specs.append(LayerSpec(name="sensor.r", in_size=width, out_size=spec.r_entries, activation="none",
                               init="zeros"))
        self.layers = specs
        n_conv = len(spec.conv_channels)
        self._convs = [ConvLayer(s) for s in specs[:n_conv]]
        self._fcs = [DenseLayer(s) for s in specs[n_conv:n_conv + len(spec.fc)]]
        self._z_head = DenseLayer(specs[-2])
        self._r_head = DenseLayer(specs[-1])
        # z head predicts positions in half-image units
        self.z_scale = spec.image_size / 2.0

    @property
    def encoding_dim(self) -> int:
        return self.spec.fc[-1]

    def declare(self, params: ParameterSet, seed: int) -> None:
        for name, value in init_params(self.layers, seed).items():
            params.add(name, value)

    def __call__(self, params: Mapping[str, Tensor], images) -> SensorOutput:
        return sensor_forward(self, params, images)


def preprocess_images(images) -> np.ndarray:
    """uint8 (T, H, W, 3) -> centered float pixels in [-0.5, 0.5]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return arr.astype(np.float64) / 255.0 - 0.5


def sensor_forward(net: SensorNet, params: Mapping[str, Tensor], images) -> SensorOutput:
    x = ad.as_tensor(preprocess_images(images) if not isinstance(images, Tensor) else images)
    s = net.spec
    if x.ndim != 4 or x.shape[1:] != (s.image_size, s.image_size, s.channels):
        raise ShapeError(f"sensor expects (T, {s.image_size}, {s.image_size}, {s.channels}) images, got {x.shape}")
    h = x
    for conv in net._convs:
        h = conv(params, h)
    h = ad.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
    for fc in net._fcs:
        h = fc(params, h)
    z = net._z_head(params, h) * net.z_scale
    return SensorOutput(z=z, r_entries=net._r_head(params, h), encoding=h)


def observation_covariance(r_model: NoiseModel, params: Mapping[str, Tensor],
                           out: Optional[SensorOutput]) -> Tensor:
    """(T, m, m) heteroscedastic R from the R head, or a single constant R."""
    if r_model.spec.flavor == "heteroscedastic":
        if out is None:
            raise ShapeError("heteroscedastic R needs sensor outputs")
        return r_model.materialize(params, out.r_entries)
    return r_model.materialize(params, r_model.entries(params))
