"""Learned observation likelihood for the particle filter.

Consumes the sensor encoding together with each particle's observable components
(unnormalized) and returns a strictly positive score per particle.
"""

import logging
from typing import List, Mapping

import numpy as np
from pydantic import BaseModel, Field

from app.core import autodiff as ad
from app.core.autodiff import Tensor, TensorLike
from app.core.errors import ShapeError
from app.models.nn import LayerSpec, ParameterSet, build_layer, init_params

logger = logging.getLogger(__name__)


class LikelihoodSpec(BaseModel):
    encoding_dim: int = Field(default=32, ge=1)
    obs_dim: int = Field(default=2, ge=1)
    hidden: List[int] = Field(default_factory=lambda: [128, 64])


class LikelihoodNet:
    def __init__(self, spec: LikelihoodSpec):
        self.spec = spec
        sizes = [spec.encoding_dim + spec.obs_dim] + list(spec.hidden)
        self.layers = [LayerSpec(name=f"likelihood.fc{i + 1}", in_size=a, out_size=b)
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.layers.append(LayerSpec(name="likelihood.out", in_size=sizes[-1], out_size=1, activation="none"))
        self._stack = [build_layer(s) for s in self.layers]

    def declare(self, params: ParameterSet, seed: int) -> None:
        for name, value in init_params(self.layers, seed).items():
            params.add(name, value)


def likelihood_log_forward(net: LikelihoodNet, params: Mapping[str, Tensor], encoding: TensorLike,
                           observed: TensorLike) -> Tensor:
    """Raw network output per particle, i.e. the log of `likelihood_forward`."""
    encoding, observed = ad.as_tensor(encoding), ad.as_tensor(observed)
    if encoding.shape != (net.spec.encoding_dim,):
        raise ShapeError(f"likelihood expects a ({net.spec.encoding_dim},) encoding, got {encoding.shape}")
    if observed.ndim != 2 or observed.shape[1] != net.spec.obs_dim:
        raise ShapeError(f"likelihood expects (N, {net.spec.obs_dim}) observable components, got {observed.shape}")
    n = observed.shape[0]
    tiled = ad.matmul(np.ones((n, 1)), ad.reshape(encoding, (1, encoding.shape[0])))
    h = ad.concat([tiled, observed], axis=1)
    for layer in net._stack:
        h = layer(params, h)
    return ad.reshape(h, (n,))


def likelihood_forward(net: LikelihoodNet, params: Mapping[str, Tensor], encoding: TensorLike,
                       observed: TensorLike) -> Tensor:
    """exp of the network output: one positive likelihood per particle."""
    return ad.exp(likelihood_log_forward(net, params, encoding, observed))
