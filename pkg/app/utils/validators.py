import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from typing import Any, Dict, Optional, Type, TypeVar

from pydantic import BaseModel, ValidationError

from app.core.errors import ConfigurationError, UsageError
from app.services.filter_config import FilterConfig, UkfParams

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)

FILTER_CHOICES = ["ekf", "ukf", "mcukf", "pf-g", "pf-m", "pf-g-lrn", "pf-m-lrn"]
PF_ONLY_FLAGS = ("gmm_sigma", "alpha_re", "resample_every")


def validated(model: Type[M], data: Dict[str, Any]) -> M:
    """Build a pydantic model, turning validation failures into configuration errors."""
    try:
        return model.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ())) or model.__name__
        raise ConfigurationError(f"invalid {model.__name__}: {where}: {first.get('msg')}") from e


def load_config_file(path: str) -> Dict[str, Any]:
    """Flat key/value TOML; keys use flag names with dashes or underscores."""
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"{path}: {e}") from e
    flat = {}
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigurationError(f"{path}: tables are not supported ('{key}')")
        flat[key.replace("-", "_")] = value
    return flat


def check_regime_flags(hetero_q: bool, correlated_q: bool) -> str:
    if hetero_q and correlated_q:
        raise UsageError("--hetero-q and --correlated-q are mutually exclusive")
    if correlated_q:
        return "correlated"
    return "heteroscedastic" if hetero_q else "constant"


def resolve_filter(name: str, particles: Optional[int] = None, eval_particles: Optional[int] = None,
                   gmm_sigma: Optional[float] = None, alpha_re: Optional[float] = None,
                   resample_every: Optional[int] = None, ukf_preset: Optional[str] = None,
                   ukf_alpha: Optional[float] = None, ukf_kappa: Optional[float] = None,
                   ukf_beta: Optional[float] = None, loss: str = "nll") -> FilterConfig:
    """FilterConfig for a command-line filter name, rejecting flags the filter does not use."""
    if name not in FILTER_CHOICES:
        raise UsageError(f"unknown filter '{name}' (choose from {', '.join(FILTER_CHOICES)})")
    is_pf = name.startswith("pf")
    given = {"gmm_sigma": gmm_sigma, "alpha_re": alpha_re, "resample_every": resample_every}
    if not is_pf:
        used = [f"--{k.replace('_', '-')}" for k in PF_ONLY_FLAGS if given[k] is not None]
        if used:
            raise UsageError(f"{', '.join(used)} only apply to particle filters, not --filter {name}")
    if name in ("ekf", "ukf") and (particles is not None or eval_particles is not None):
        raise UsageError(f"--particles does not apply to --filter {name}")
    if name != "ukf" and any(v is not None for v in (ukf_preset, ukf_alpha, ukf_kappa, ukf_beta)):
        raise UsageError(f"UKF parameters do not apply to --filter {name}")

    data: Dict[str, Any] = {"kind": "pf" if is_pf else name, "loss": loss}
    if is_pf:
        data["pf_belief"] = "single-gaussian" if name.startswith("pf-g") else "gmm"
        data["pf_update"] = "learned" if name.endswith("-lrn") else "analytic"
        data.update({k: v for k, v in given.items() if v is not None})
    if particles is not None:
        data["sample_count_train"] = particles
    if eval_particles is not None:
        data["sample_count_eval"] = eval_particles
    if name == "ukf":
        ukf = {"alpha": ukf_alpha, "kappa": ukf_kappa, "beta": ukf_beta}
        ukf = {k: v for k, v in ukf.items() if v is not None}
        if ukf_preset is not None:
            ukf["preset"] = ukf_preset
        data["ukf"] = validated(UkfParams, ukf)
    return validated(FilterConfig, data)
