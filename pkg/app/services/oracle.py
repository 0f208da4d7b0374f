"""Linear-Gaussian reference checks.

A random linear system is filtered both by the differentiable filters and by a textbook
Kalman filter written directly in numpy. The composed-filter gradient suite lives here as
well, since it runs the filters over the same kind of system.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from app.core import autodiff as ad
from app.core.autodiff import Tensor
from app.core.errors import ConfigurationError
from app.core.gradcheck import GradCheckReport, gradient_check
from app.models.bundle import BoundModels, FilterModels, ModelsSpec
from app.models.noise import NoiseSpec
from app.models.process import ProcessSpec
from app.services.filter_config import FilterConfig
from app.services.runner import initial_belief, run_filter

logger = logging.getLogger(__name__)

EXACT_TOLERANCE = 1e-8
ORACLE_FILTERS = ["ekf", "ukf", "mcukf", "pf"]
DEFAULT_SAMPLES = {"mcukf": 100_000, "pf": 10_000}


@dataclass
class LinearSystem:
    models: FilterModels
    a: np.ndarray
    h: np.ndarray
    q: np.ndarray
    r: np.ndarray
    mean0: np.ndarray
    cov0: np.ndarray
    states: np.ndarray  # (T+1, n)
    zs: np.ndarray      # (T, m)


class OracleReport(BaseModel):
    filter: str
    seed: int
    steps: int
    samples: Optional[int] = None
    max_mean_dev: float
    max_cov_dev: Optional[float] = None
    tolerance: Optional[float] = None
    mean_bound: Optional[float] = None
    within_bound: Optional[float] = None
    passed: bool


def _randomize_noise(models: FilterModels, rng: np.random.Generator, scale: float = 0.3) -> None:
    for spec in (models.spec.q, models.spec.r):
        name = f"{spec.name}.entries"
        models.params.update({name: rng.normal(scale=scale, size=models.params.values[name].shape)})


def random_linear_system(seed: int, steps: int = 50, state_dim: int = 4, obs_dim: int = 2) -> LinearSystem:
    """A stable random system with correlated Q and R, simulated for `steps` steps."""
    rng = np.random.default_rng(seed)
    ortho, _ = np.linalg.qr(rng.normal(size=(state_dim, state_dim)))
    a = 0.95 * ortho
    h = rng.normal(size=(obs_dim, state_dim))
    spec = ModelsSpec(
        state_dim=state_dim,
        obs_dim=obs_dim,
        observation_matrix=h.tolist(),
        process=ProcessSpec(kind="linear", state_dim=state_dim, matrix=a.tolist()),
        q=NoiseSpec(name="q", dim=state_dim, shape="full", target=[1.0]),
        r=NoiseSpec(name="r", dim=obs_dim, shape="full", target=[0.5]),
        seed=seed,
    )
    models = FilterModels(spec)
    _randomize_noise(models, rng)
    bound = models.bind(None)
    q = bound.process_noise().data.astype(np.float64)
    r = bound.observations_from_z(np.zeros((1, obs_dim)))[0].r.data.astype(np.float64)

    mean0 = rng.normal(size=state_dim)
    cov0 = np.eye(state_dim)
    states = [rng.multivariate_normal(mean0, cov0)]
    zs = []
    for _ in range(steps):
        states.append(a @ states[-1] + rng.multivariate_normal(np.zeros(state_dim), q))
        zs.append(h @ states[-1] + rng.multivariate_normal(np.zeros(obs_dim), r))
    return LinearSystem(models, a, h, q, r, mean0, cov0, np.stack(states), np.stack(zs))


def kalman_filter(system: LinearSystem) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form posterior means (T, n) and covariances (T, n, n)."""
    a, h, q, r = system.a, system.h, system.q, system.r
    mean, cov = system.mean0.copy(), system.cov0.copy()
    n = mean.shape[0]
    means, covs = [], []
    for z in system.zs:
        mean = a @ mean
        cov = a @ cov @ a.T + q
        s = h @ cov @ h.T + r
        gain = np.linalg.solve(s, h @ cov).T
        mean = mean + gain @ (z - h @ mean)
        cov = (np.eye(n) - gain @ h) @ cov
        cov = 0.5 * (cov + cov.T)
        means.append(mean)
        covs.append(cov)
    return np.stack(means), np.stack(covs)


def oracle_filter_config(kind: str, samples: Optional[int] = None, alpha_re: float = 1.0) -> FilterConfig:
    if kind not in ORACLE_FILTERS:
        raise ConfigurationError(f"unknown oracle filter '{kind}'")
    count = samples or DEFAULT_SAMPLES.get(kind, 100)
    return FilterConfig(kind=kind, sample_count_train=count, sample_count_eval=count,
                        pf_belief="single-gaussian", alpha_re=alpha_re)


def oracle_check(kind: str, seed: int = 0, steps: int = 50, samples: Optional[int] = None) -> OracleReport:
    """Max deviation of a differentiable filter from the Kalman filter on a random linear system.

    ekf/ukf must match to 1e-8 in mean and covariance. mcukf and pf are judged per step
    against Monte-Carlo bounds: 5 sigma / sqrt(samples) per component for the mcukf and
    3 sqrt(tr Sigma / samples) in norm for the pf.
    """
    with ad.precision_scope("float64"):
        system = random_linear_system(seed, steps)
        ref_means, ref_covs = kalman_filter(system)
        config = oracle_filter_config(kind, samples)
        bound = system.models.bind(None)
        rng = np.random.default_rng([seed, 1])
        run = run_filter(None, initial_belief(system.mean0, system.cov0), config, bound, rng,
                         observations=bound.observations_from_z(system.zs))
        means = run.mean_array()
    mean_dev = np.abs(means - ref_means)
    if kind in ("ekf", "ukf"):
        covs = np.stack([b.cov.data for b in run.beliefs]).astype(np.float64)
        cov_dev = float(np.max(np.abs(covs - ref_covs)))
        max_dev = float(np.max(mean_dev))
        report = OracleReport(filter=kind, seed=seed, steps=steps, max_mean_dev=max_dev, max_cov_dev=cov_dev,
                              tolerance=EXACT_TOLERANCE,
                              passed=max_dev < EXACT_TOLERANCE and cov_dev < EXACT_TOLERANCE)
    else:
        count = config.sample_count_eval
        if kind == "mcukf":
            sigma = np.sqrt(np.diagonal(ref_covs, axis1=1, axis2=2))
            bounds = 5.0 * sigma / np.sqrt(count)
            ok = np.all(mean_dev < bounds, axis=1)
            bound_value = float(np.max(bounds))
        else:
            bounds = 3.0 * np.sqrt(np.trace(ref_covs, axis1=1, axis2=2) / count)
            ok = np.linalg.norm(means - ref_means, axis=1) < bounds
            bound_value = float(np.max(bounds))
        within = float(np.mean(ok))
        report = OracleReport(filter=kind, seed=seed, steps=steps, samples=count,
                              max_mean_dev=float(np.max(mean_dev)), mean_bound=bound_value,
                              within_bound=within, passed=within >= 0.95)
    if not report.passed:
        logger.warning(f"oracle check for {kind} (seed {seed}) outside tolerance: {report.max_mean_dev:.3e}")
    return report


def oracle_suite(kinds: Optional[List[str]] = None, seed: int = 0, steps: int = 50,
                 samples: Optional[int] = None) -> Dict[str, OracleReport]:
    return {k: oracle_check(k, seed, steps, samples) for k in (kinds or ORACLE_FILTERS)}


# ---------------------------------------------------------------------------
# gradients through whole filter runs

def _unflatten(models: FilterModels, names: List[str], x: Tensor) -> Dict[str, Tensor]:
    params: Dict[str, Tensor] = {n: ad.constant(v) for n, v in models.params.values.items()}
    offset = 0
    for name in names:
        shape = models.params.values[name].shape
        size = int(np.prod(shape)) if shape else 1
        params[name] = ad.reshape(x[offset:offset + size], shape)
        offset += size
    return params


def filter_gradcheck(kind: str, seed: int = 0, steps: int = 3, tol: float = 1e-4,
                     samples: int = 16) -> GradCheckReport:
    """Finite-difference check of a `steps`-step NLL with respect to every model parameter.

    Uses a small learned process, full constant Q and diagonal constant R. The particle
    filter runs without resampling (ancestor draws carry no gradient).
    """
    if kind not in ORACLE_FILTERS:
        raise ConfigurationError(f"unknown filter '{kind}'")
    with ad.precision_scope("float64"):
        rng = np.random.default_rng(seed)
        base = random_linear_system(seed, steps)
        spec = ModelsSpec(
            observation_matrix=base.h.tolist(),
            process=ProcessSpec(kind="learned", hidden=[6]),
            q=NoiseSpec(name="q", dim=4, shape="full", target=[1.0]),
            r=NoiseSpec(name="r", dim=2, target=[0.5]),
            seed=seed,
        )
        models = FilterModels(spec)
        models.params.update({n: v + rng.normal(scale=0.2, size=v.shape) for n, v in models.params.values.items()})
        names = models.params.trainable_names()
        x0 = np.concatenate([models.params.values[n].ravel() for n in names])
        config = FilterConfig(kind=kind, sample_count_train=samples, sample_count_eval=samples, resample=False,
                              pf_belief="gmm")
        labels = base.states[1:]

    def loss(x: Tensor) -> Tensor:
        bound = BoundModels(models, _unflatten(models, names, x))
        run = run_filter(None, initial_belief(base.mean0, base.cov0), config, bound,
                         np.random.default_rng([seed, 2]), observations=bound.observations_from_z(base.zs),
                         labels=labels)
        return run.loss

    return gradient_check(loss, x0, tol=tol, name=f"filter.{kind}")


def filter_gradcheck_suite(seed: int = 0, tol: float = 1e-4,
                           kinds: Optional[List[str]] = None) -> Dict[str, GradCheckReport]:
    reports = {}
    for kind in kinds or ["ekf", "ukf", "mcukf", "pf"]:
        report = filter_gradcheck(kind, seed, tol=tol)
        reports[report.name] = report
    return reports
