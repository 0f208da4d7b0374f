"""Filter configuration models and per-step diagnostics."""

from dataclasses import dataclass
from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator

from app.core.errors import ConfigurationError

FilterKind = Literal["ekf", "ukf", "mcukf", "pf"]
LossKind = Literal["mse", "nll", "mix"]

UKF_PRESETS = {
    "paper": {"alpha": 1.0, "kappa": 0.5, "beta": 0.0},
    "julier": {"alpha": 1.0, "beta": 0.0},  # kappa = 3 - n, resolved per dimension
    "scaled": {"alpha": 0.5, "kappa": 0.0, "beta": 2.0},
}


class UkfParams(BaseModel):
    alpha: Optional[float] = None
    kappa: Optional[float] = None
    beta: Optional[float] = None
    preset: Literal["paper", "julier", "scaled"] = "paper"

    @model_validator(mode="after")
    def _fill_from_preset(self):
        defaults = UKF_PRESETS[self.preset]
        for key in ("alpha", "beta", "kappa"):
            if getattr(self, key) is None and key in defaults:
                setattr(self, key, defaults[key])
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        return self

    def resolved_kappa(self, n: int) -> float:
        return self.kappa if self.kappa is not None else 3.0 - n

    def lam(self, n: int) -> float:
        return self.alpha ** 2 * (self.resolved_kappa(n) + n) - n

    def check(self, n: int) -> None:
        """lambda + n must be positive for the sigma-point spread to exist."""
        if self.lam(n) + n <= 0:
            raise ConfigurationError(
                f"UKF parameters alpha={self.alpha}, kappa={self.resolved_kappa(n)} give "
                f"lambda + n = {self.lam(n) + n:.4g} <= 0 for n={n}: the sigma-point covariance "
                f"is not invertible"
            )


class FilterConfig(BaseModel):
    kind: FilterKind = "ekf"
    ukf: UkfParams = Field(default_factory=UkfParams)
    sample_count_train: int = Field(default=100, ge=1)
    sample_count_eval: int = Field(default=500, ge=1)
    pf_update: Literal["analytic", "learned"] = "analytic"
    pf_belief: Literal["single-gaussian", "gmm"] = "gmm"
    gmm_sigma: float = Field(default=1.0, gt=0)
    resample_every: int = Field(default=1, ge=1)
    alpha_re: float = Field(default=0.05, ge=0.0, le=1.0)
    resample: bool = True
    loss: LossKind = "nll"

    @model_validator(mode="after")
    def _check_counts(self):
        if self.kind == "mcukf" and min(self.sample_count_train, self.sample_count_eval) < 2:
            raise ValueError("the MCUKF needs at least 2 samples")
        return self

    def sample_count(self, training: bool) -> int:
        return self.sample_count_train if training else self.sample_count_eval

    @property
    def label(self) -> str:
        if self.kind != "pf":
            return self.kind
        belief = "g" if self.pf_belief == "single-gaussian" else "m"
        return f"pf-{belief}" + ("-lrn" if self.pf_update == "learned" else "")


@dataclass
class StepDiagnostics:
    innovation_norm: float
    ess: Optional[float] = None
    resampled: bool = False
    weights_reset: bool = False
