"""The set of learned components a filter runs with, and their per-tape binding."""

import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field

from app.core import autodiff as ad
from app.core.autodiff import Tape, Tensor, TensorLike
from app.core.errors import ConfigurationError, ShapeError
from app.models.likelihood import LikelihoodNet, LikelihoodSpec, likelihood_log_forward
from app.models.nn import LayerSpec, ParameterSet
from app.models.noise import NoiseModel, NoiseSpec, process_noise
from app.models.process import ProcessModel, ProcessSpec, process_forward
from app.models.sensor import SensorNet, SensorSpec, observation_covariance, sensor_forward

logger = logging.getLogger(__name__)

# position selection for the disc state (p_x, p_y, v_x, v_y)
DISC_H = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])


def observation_model_h(x: TensorLike, h: Optional[np.ndarray] = None) -> Tensor:
    """H x for a state (n,) or each row of (N, n)."""
    h = DISC_H if h is None else h
    return ad.matmul(ad.as_tensor(x), h.T)


@dataclass
class Observation:
    z: Tensor
    r: Tensor
    encoding: Optional[Tensor] = None


class ModelsSpec(BaseModel):
    state_dim: int = 4
    obs_dim: int = 2
    observation_matrix: Optional[List[List[float]]] = None
    process: ProcessSpec = Field(default_factory=ProcessSpec)
    q: NoiseSpec = Field(default_factory=lambda: NoiseSpec(name="q", dim=4, target=[100.0], input_dim=4))
    r: NoiseSpec = Field(default_factory=lambda: NoiseSpec(name="r", dim=2, target=[900.0]))
    sensor: Optional[SensorSpec] = None
    likelihood: Optional[LikelihoodSpec] = None
    seed: int = 0

    def h_matrix(self) -> np.ndarray:
        if self.observation_matrix is None:
            if (self.obs_dim, self.state_dim) != DISC_H.shape:
                raise ConfigurationError("non-disc dimensions need an explicit observation matrix")
            return DISC_H.copy()
        h = np.asarray(self.observation_matrix, dtype=np.float64)
        if h.shape != (self.obs_dim, self.state_dim):
            raise ConfigurationError(f"observation matrix must be {self.obs_dim}x{self.state_dim}")
        return h


class FilterModels:
    """Process, noise, sensor and likelihood components sharing one ParameterSet."""

    def __init__(self, spec: ModelsSpec, params: Optional[ParameterSet] = None):
        self.spec = spec
        self.h = spec.h_matrix()
        self.process = ProcessModel(spec.process)
        self.q = NoiseModel(spec.q)
        self.r = NoiseModel(spec.r)
        self.sensor = SensorNet(spec.sensor) if spec.sensor is not None else None
        self.likelihood = LikelihoodNet(spec.likelihood) if spec.likelihood is not None else None
        if spec.r.flavor == "heteroscedastic" and self.sensor is None:
            raise ConfigurationError("heteroscedastic R is predicted by the sensor network")
        if self.sensor is not None and self.sensor.spec.r_entries != spec.r.entry_count:
            raise ConfigurationError("sensor R head does not match the R noise shape")
        if params is None:
            params = ParameterSet()
            seed = spec.seed
            for offset, part in enumerate(self._parts()):
                part.declare(params, seed + 7919 * offset)
        self.params = params

    def _parts(self):
        parts = [self.process, self.q, self.r]
        if self.sensor is not None:
            parts.append(self.sensor)
        if self.likelihood is not None:
            parts.append(self.likelihood)
        return parts

    def layers(self) -> List[LayerSpec]:
        out: List[LayerSpec] = []
        for part in self._parts():
            out.extend(part.layers)
        return out

    def freeze(self, prefix: str) -> None:
        self.params.freeze(prefix)

    def bind(self, tape: Optional[Tape]) -> "BoundModels":
        return BoundModels(self, self.params.bind(tape))


class BoundModels:
    """Models with parameters bound to one tape (or to constants when tape is None)."""

    def __init__(self, models: FilterModels, params: Dict[str, Tensor]):
        self.models = models
        self.params = params
        self.h = models.h

    @property
    def state_dim(self) -> int:
        return self.models.spec.state_dim

    def process(self, x: TensorLike, u: Optional[TensorLike] = None) -> Tensor:
        return process_forward(self.models.process, self.params, x, u)

    def process_noise(self, x: Optional[TensorLike] = None, weights: Optional[TensorLike] = None) -> Tensor:
        return process_noise(self.models.q, self.params, x, weights)

    def observe_h(self, x: TensorLike) -> Tensor:
        return observation_model_h(x, self.h)

    def observe(self, images) -> List[Observation]:
        """One sensor pass over a stack of images."""
        if self.models.sensor is None:
            raise ConfigurationError("no sensor network configured")
        out = sensor_forward(self.models.sensor, self.params, images)
        r = observation_covariance(self.models.r, self.params, out)
        hetero = r.ndim == 3
        return [Observation(z=out.z[t], r=r[t] if hetero else r, encoding=out.encoding[t])
                for t in range(out.z.shape[0])]

    def observations_from_z(self, zs) -> List[Observation]:
        """Observations for externally supplied measurements, with the constant R model."""
        zs = np.asarray(zs, dtype=np.float64)
        if zs.ndim != 2 or zs.shape[1] != self.models.spec.obs_dim:
            raise ShapeError(f"expected (T, {self.models.spec.obs_dim}) measurements, got {zs.shape}")
        r = observation_covariance(self.models.r, self.params, None)
        return [Observation(z=ad.constant(z), r=r) for z in zs]

    def likelihood_log(self, encoding: Tensor, particles: Tensor) -> Tensor:
        if self.models.likelihood is None:
            raise ConfigurationError("no likelihood network configured")
        return likelihood_log_forward(self.models.likelihood, self.params, encoding, self.observe_h(particles))


class ModelOptions(BaseModel):
    """Switches that pick the disc-task model family."""

    image_size: int = 100
    process: Literal["learned", "analytic"] = "learned"
    hetero_q: bool = False
    hetero_r: bool = False
    full_cov: bool = False
    learned_likelihood: bool = False
    q_init: float = Field(default=100.0, gt=0)
    r_init: float = Field(default=900.0, gt=0)


def disc_models_spec(options: ModelOptions, seed: int = 0) -> ModelsSpec:
    shape = "full" if options.full_cov else "diagonal"
    sensor = SensorSpec(image_size=options.image_size, r_shape=shape)
    return ModelsSpec(
        process=ProcessSpec(kind=options.process),
        q=NoiseSpec(name="q", dim=4, flavor="heteroscedastic" if options.hetero_q else "constant",
                    shape=shape, target=[options.q_init], input_dim=4),
        r=NoiseSpec(name="r", dim=2, flavor="heteroscedastic" if options.hetero_r else "constant",
                    shape=shape, target=[options.r_init]),
        sensor=sensor,
        likelihood=LikelihoodSpec(encoding_dim=sensor.fc[-1]) if options.learned_likelihood else None,
        seed=seed,
    )
