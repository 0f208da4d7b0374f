"""Dense and convolutional layers, parameter storage and the Adam optimizer.

Parameters live as plain arrays in a `ParameterSet` that is read-shared between worker
threads. Each worker binds them onto its own Tape, runs forward passes with the bound
Tensors, and hands gradients back to the single writer that calls `adam_step`.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Literal, Mapping, Optional

import numpy as np
from pydantic import BaseModel, Field

from app.core import autodiff as ad
from app.core.autodiff import Tape, Tensor, TensorLike
from app.core.config import settings
from app.core.errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

Activation = Literal["relu", "none", "exp"]


class LayerSpec(BaseModel):
    name: str
    kind: Literal["dense", "conv"] = "dense"
    in_size: int = Field(ge=1)
    out_size: int = Field(ge=1)
    kernel: int = Field(default=1, ge=1)
    stride: int = Field(default=1, ge=1)
    activation: Activation = "relu"
    # he: He-uniform fan-in; zeros: all-zero weights; small: He-uniform scaled by init_scale
    init: Literal["he", "zeros", "small"] = "he"
    init_scale: float = 1.0

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "dense":
            return (self.out_size, self.in_size)
        return (self.kernel, self.kernel, self.in_size, self.out_size)

    @property
    def fan_in(self) -> int:
        return self.in_size * (self.kernel * self.kernel if self.kind == "conv" else 1)


def _activate(x: Tensor, activation: Activation) -> Tensor:
    if activation == "relu":
        return ad.relu(x)
    if activation == "exp":
        return ad.exp(x)
    return x


class DenseLayer:
    """activation(x W^T + b) over the last axis of x."""

    def __init__(self, spec: LayerSpec):
        if spec.kind != "dense":
            raise ConfigurationError(f"layer '{spec.name}' is not a dense layer")
        self.spec = spec

    def __call__(self, params: Mapping[str, Tensor], x: TensorLike) -> Tensor:
        return dense_forward(self, params, x)


class ConvLayer:
    """Same-padded strided convolution over NHWC images."""

    def __init__(self, spec: LayerSpec):
        if spec.kind != "conv":
            raise ConfigurationError(f"layer '{spec.name}' is not a convolution")
        self.spec = spec

    def output_size(self, height: int, width: int) -> tuple:
        s = self.spec.stride
        return -(-height // s), -(-width // s), self.spec.out_size

    def __call__(self, params: Mapping[str, Tensor], x: TensorLike) -> Tensor:
        return conv_forward(self, params, x)


def dense_forward(layer: DenseLayer, params: Mapping[str, Tensor], x: TensorLike) -> Tensor:
    spec = layer.spec
    x = ad.as_tensor(x)
    if x.shape[-1] != spec.in_size:
        raise ShapeError(f"{spec.name}: expected last dimension {spec.in_size}, got {x.shape}")
    w, b = params[f"{spec.name}.w"], params[f"{spec.name}.b"]
    return _activate(ad.matmul(x, ad.transpose(w)) + b, spec.activation)


def conv_forward(layer: ConvLayer, params: Mapping[str, Tensor], x: TensorLike) -> Tensor:
    spec = layer.spec
    x = ad.as_tensor(x)
    if x.ndim != 4 or x.shape[-1] != spec.in_size:
        raise ShapeError(f"{spec.name}: expected (N, H, W, {spec.in_size}) input, got {x.shape}")
    w, b = params[f"{spec.name}.w"], params[f"{spec.name}.b"]
    out = ad.conv2d(x, w, (spec.stride, spec.stride))
    return _activate(out + b, spec.activation)


def build_layer(spec: LayerSpec):
    return DenseLayer(spec) if spec.kind == "dense" else ConvLayer(spec)


def init_params(specs: Iterable[LayerSpec], seed: int) -> Dict[str, np.ndarray]:
    """He-uniform fan-in weights (variance 2/fan_in) and zero biases; deterministic in seed."""
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for spec in specs:
        limit = np.sqrt(6.0 / spec.fan_in)
        if spec.init == "zeros":
            w = np.zeros(spec.weight_shape)
        else:
            w = rng.uniform(-limit, limit, size=spec.weight_shape)
            if spec.init == "small":
                w = w * spec.init_scale
        params[f"{spec.name}.w"] = w
        params[f"{spec.name}.b"] = np.zeros(spec.out_size)
    return params


@dataclass
class ParameterSet:
    """Ordered named arrays plus a per-name trainable flag."""

    values: Dict[str, np.ndarray] = field(default_factory=dict)
    frozen: set = field(default_factory=set)

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self.values:
            raise ConfigurationError(f"parameter '{name}' declared twice")
        self.values[name] = np.array(value, dtype=np.float64)
        if not trainable:
            self.frozen.add(name)

    def update(self, values: Mapping[str, np.ndarray]) -> None:
        for name, value in values.items():
            if name not in self.values:
                raise ConfigurationError(f"unknown parameter '{name}'")
            if np.shape(value) != self.values[name].shape:
                raise ShapeError(f"parameter '{name}': shape {np.shape(value)} != {self.values[name].shape}")
            self.values[name] = np.array(value, dtype=np.float64)

    def freeze(self, prefix: str) -> None:
        self.frozen.update(n for n in self.values if n.startswith(prefix))

    def trainable_names(self) -> List[str]:
        return [n for n in self.values if n not in self.frozen]

    def bind(self, tape: Optional[Tape]) -> Dict[str, Tensor]:
        """Tensors for one forward pass: trainable names become leaves on `tape`."""
        bound: Dict[str, Tensor] = {}
        for name, value in self.values.items():
            if tape is not None and name not in self.frozen:
                bound[name] = tape.leaf(value, name)
            else:
                bound[name] = ad.constant(value)
        return bound

    def copy(self) -> "ParameterSet":
        return ParameterSet({n: v.copy() for n, v in self.values.items()}, set(self.frozen))

    def __len__(self) -> int:
        return len(self.values)

    def __contains__(self, name: str) -> bool:
        return name in self.values


@dataclass
class AdamState:
    lr: float = settings.learning_rate
    beta1: float = settings.adam_beta1
    beta2: float = settings.adam_beta2
    eps: float = settings.adam_eps
    step: int = 0
    skipped: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """One bias-corrected Adam update of the names present in `grads`.

    A non-finite gradient anywhere skips the whole step and bumps `state.skipped`.
    """
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ShapeError(f"gradient for '{name}' has shape {np.shape(g)}, parameter {np.shape(params[name])}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        logger.warning(f"non-finite gradient, skipping optimizer step ({state.skipped} skipped so far)")
        return dict(params)

    state.step += 1
    t = state.step
    updated = dict(params)
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        updated[name] = params[name] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))
