"""Process models: the analytic disc dynamics, a fixed linear map, and the learned delta net."""

import logging
from typing import List, Literal, Mapping, Optional

import numpy as np
from pydantic import BaseModel, Field

from app.core import autodiff as ad
from app.core.autodiff import Tensor, TensorLike
from app.core.errors import ConfigurationError, ShapeError
from app.models.nn import LayerSpec, ParameterSet, build_layer, init_params

logger = logging.getLogger(__name__)

F_PULL = 0.05
F_DRAG = 0.0075

ProcessKind = Literal["analytic", "learned", "linear"]


def disc_process_analytic(x: TensorLike, f_pull: float = F_PULL, f_drag: float = F_DRAG) -> Tensor:
    """p' = p + v, v' = v - f_p p - f_d v^2 sgn(v). x is (..., 4) = (p_x, p_y, v_x, v_y)."""
    x = ad.as_tensor(x)
    if x.shape[-1] != 4:
        raise ShapeError(f"disc dynamics expect 4 state components, got {x.shape}")
    p, v = x[..., 0:2], x[..., 2:4]
    drag = ad.square(v) * ad.sign(v)
    return ad.concat([p + v, v - p * f_pull - drag * f_drag], axis=-1)


def disc_process_jacobian(x, f_pull: float = F_PULL, f_drag: float = F_DRAG) -> np.ndarray:
    """Hand-derived Jacobian of disc_process_analytic (valid away from v = 0)."""
    v = np.asarray(x, dtype=np.float64)[2:4]
    jac = np.zeros((4, 4))
    jac[0:2, 0:2] = np.eye(2)
    jac[0:2, 2:4] = np.eye(2)
    jac[2:4, 0:2] = -f_pull * np.eye(2)
    jac[2:4, 2:4] = np.eye(2) - 2.0 * f_drag * np.diag(np.abs(v))
    return jac


class ProcessSpec(BaseModel):
    kind: ProcessKind = "analytic"
    state_dim: int = Field(default=4, ge=1)
    control_dim: int = Field(default=0, ge=0)
    hidden: List[int] = Field(default_factory=lambda: [32, 64, 64])
    # transition matrix for kind="linear"
    matrix: Optional[List[List[float]]] = None


class ProcessModel:
    """x_{t+1} mean from x_t (and optional control u)."""

    def __init__(self, spec: ProcessSpec):
        self.spec = spec
        self.layers: List[LayerSpec] = []
        if spec.kind == "learned":
            sizes = [spec.state_dim + spec.control_dim] + list(spec.hidden)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                self.layers.append(LayerSpec(name=f"process.fc{i + 1}", in_size=a, out_size=b))
            # zero head: the untrained model is the identity on states
            self.layers.append(LayerSpec(name="process.delta", in_size=sizes[-1],
                                         out_size=spec.state_dim, activation="none", init="zeros"))
        elif spec.kind == "linear":
            a = np.asarray(spec.matrix if spec.matrix is not None else np.eye(spec.state_dim))
            if a.shape != (spec.state_dim, spec.state_dim):
                raise ConfigurationError(f"linear process matrix must be {spec.state_dim}x{spec.state_dim}")
        elif spec.kind == "analytic" and spec.state_dim != 4:
            raise ConfigurationError("the analytic disc process is 4-dimensional")
        self._stack = [build_layer(s) for s in self.layers]

    def declare(self, params: ParameterSet, seed: int) -> None:
        if self.spec.kind == "linear":
            params.add("process.matrix", self.spec.matrix if self.spec.matrix is not None
                       else np.eye(self.spec.state_dim))
        for name, value in init_params(self.layers, seed).items():
            params.add(name, value)

    def __call__(self, params: Mapping[str, Tensor], x: TensorLike, u: Optional[TensorLike] = None) -> Tensor:
        return process_forward(self, params, x, u)


def process_forward(model: ProcessModel, params: Mapping[str, Tensor], x: TensorLike,
                    u: Optional[TensorLike] = None) -> Tensor:
    """Next-state mean for a state (n,) or a batch of states (N, n)."""
    x = ad.as_tensor(x)
    kind = model.spec.kind
    if kind == "analytic":
        return disc_process_analytic(x)
    if kind == "linear":
        return ad.matmul(x, ad.transpose(params["process.matrix"]))
    h = x
    if model.spec.control_dim:
        if u is None:
            raise ConfigurationError("process model expects a control input")
        u = ad.as_tensor(u)
        if x.ndim == 2 and u.ndim == 1:
            u = ad.matmul(np.ones((x.shape[0], 1)), ad.reshape(u, (1, u.shape[0])))
        h = ad.concat([x, u], axis=-1)
    for layer in model._stack:
        h = layer(params, h)
    return x + h
