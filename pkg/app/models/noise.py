"""Process and observation noise models.

A model is either constant (trainable entries) or heteroscedastic (entries predicted per
input), and either diagonal or full. Both pass through `materialize_cov`, whose trainable
bias is initialized so that a zero entry reproduces the configured target variance.
"""

import logging
from typing import List, Literal, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from app.core import autodiff as ad
from app.core.autodiff import Tensor, TensorLike
from app.core.config import settings
from app.core.errors import ConfigurationError, ShapeError
from app.core.gaussian import CovMode, bias_for_target, materialize_cov, tri_size
from app.models.nn import LayerSpec, ParameterSet, build_layer, init_params

logger = logging.getLogger(__name__)

NoiseFlavor = Literal["constant", "heteroscedastic"]


class NoiseSpec(BaseModel):
    name: str
    dim: int = Field(ge=1)
    flavor: NoiseFlavor = "constant"
    shape: CovMode = "diagonal"
    target: List[float]
    eps: float = Field(default_factory=lambda: settings.noise_eps, gt=0)
    # input size of the heteroscedastic network (ignored for constant noise and for heads
    # that live in another network, such as the sensor's R head)
    input_dim: int = 0
    hidden: List[int] = Field(default_factory=lambda: [32, 32])

    @property
    def entry_count(self) -> int:
        return self.dim if self.shape == "diagonal" else tri_size(self.dim)

    def target_diag(self) -> np.ndarray:
        t = np.asarray(self.target, dtype=np.float64)
        if t.size == 1:
            t = np.full(self.dim, float(t))
        if t.shape != (self.dim,):
            raise ConfigurationError(f"{self.name}: target needs {self.dim} values, got {t.size}")
        return t


class NoiseModel:
    def __init__(self, spec: NoiseSpec):
        self.spec = spec
        self.layers: List[LayerSpec] = []
        if spec.flavor == "heteroscedastic" and spec.input_dim > 0:
            sizes = [spec.input_dim] + list(spec.hidden)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                self.layers.append(LayerSpec(name=f"{spec.name}.fc{i + 1}", in_size=a, out_size=b))
            self.layers.append(LayerSpec(name=f"{spec.name}.out", in_size=sizes[-1],
                                         out_size=spec.entry_count, activation="none",
                                         init="zeros"))
        self._stack = [build_layer(s) for s in self.layers]

    @property
    def bias_name(self) -> str:
        return f"{self.spec.name}.bias"

    @property
    def entries_name(self) -> str:
        return f"{self.spec.name}.entries"

    def declare(self, params: ParameterSet, seed: int) -> None:
        params.add(self.bias_name, bias_for_target(self.spec.target_diag(), self.spec.eps))
        if self.spec.flavor == "constant":
            params.add(self.entries_name, np.zeros(self.spec.entry_count))
        for name, value in init_params(self.layers, seed).items():
            params.add(name, value)

    def reset_target(self, params: ParameterSet, target: Sequence[float]) -> None:
        """Re-aim the bias at a new initial target, zeroing the constant entries."""
        self.spec = self.spec.model_copy(update={"target": list(target)})
        update = {self.bias_name: bias_for_target(self.spec.target_diag(), self.spec.eps)}
        if self.spec.flavor == "constant":
            update[self.entries_name] = np.zeros(self.spec.entry_count)
        params.update(update)

    def entries(self, params: Mapping[str, Tensor], x: Optional[TensorLike] = None) -> Tensor:
        if self.spec.flavor == "constant":
            return params[self.entries_name]
        if not self._stack:
            raise ConfigurationError(f"{self.spec.name}: heteroscedastic entries come from another network")
        if x is None:
            raise ConfigurationError(f"{self.spec.name}: heteroscedastic noise needs an input")
        h = ad.as_tensor(x)
        for layer in self._stack:
            h = layer(params, h)
        return h

    def materialize(self, params: Mapping[str, Tensor], entries: TensorLike) -> Tensor:
        return materialize_cov(entries, self.spec.shape, params[self.bias_name], self.spec.eps)

    def covariance(self, params: Mapping[str, Tensor], x: Optional[TensorLike] = None,
                   weights: Optional[TensorLike] = None) -> Tensor:
        return process_noise(self, params, x, weights)


def process_noise(model: NoiseModel, params: Mapping[str, Tensor], x: Optional[TensorLike] = None,
                  weights: Optional[TensorLike] = None) -> Tensor:
    """Noise covariance at a point, or the weighted mean over a point set.

    x may be a single input (d,) or a set (P, d); `weights` (P,) must be normalized.
    """
    if model.spec.flavor == "constant":
        return model.materialize(params, model.entries(params))
    x = ad.as_tensor(x)
    single = x.ndim == 1
    pts = ad.reshape(x, (1, x.shape[0])) if single else x
    covs = model.materialize(params, model.entries(params, pts))
    if single:
        return covs[0]
    if weights is None:
        return ad.reduce_mean(covs, axis=0)
    weights = ad.as_tensor(weights)
    if weights.shape != (pts.shape[0],):
        raise ShapeError(f"{model.spec.name}: {weights.shape} weights for {pts.shape[0]} points")
    return ad.reduce_sum(covs * ad.reshape(weights, (pts.shape[0], 1, 1)), axis=0)
