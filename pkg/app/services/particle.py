"""Differentiable particle filter: soft resampling, prediction, weight update, belief summaries."""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from app.core import autodiff as ad
from app.core.autodiff import Tensor, TensorLike
from app.core.errors import ConfigurationError, ShapeError
from app.core.gaussian import (GaussianBelief, GaussianMixture, fit_gaussian, gaussian_log_likelihood,
                               sample_gaussian)
from app.models.bundle import BoundModels, Observation
from app.services.filter_config import FilterConfig, StepDiagnostics

logger = logging.getLogger(__name__)


@dataclass
class ParticleBelief:
    particles: Tensor    # (N, n)
    weights: Tensor      # (N,), normalized
    log_weights: Tensor  # (N,), log of weights

    @property
    def count(self) -> int:
        return self.particles.shape[0]

    def mean(self) -> Tensor:
        return ad.matmul(self.weights, self.particles)

    def ess(self) -> float:
        w = self.weights.data
        return float(1.0 / np.sum(w * w))

    def validate(self, tol: float = 1e-9) -> "ParticleBelief":
        w = self.weights.data
        if self.particles.ndim != 2 or w.shape != (self.count,):
            raise ShapeError(f"particles {self.particles.shape} do not match weights {w.shape}")
        if np.any(w < 0) or abs(float(w.sum()) - 1.0) > tol:
            raise ConfigurationError(f"particle weights must be normalized (sum={float(w.sum())})")
        return self


def _tiny() -> float:
    return float(np.finfo(ad.default_dtype()).tiny)


def _uniform(n: int) -> Tuple[Tensor, Tensor]:
    return ad.constant(np.full(n, 1.0 / n)), ad.constant(np.full(n, -np.log(n)))


def init_particles(bel: GaussianBelief, count: int, rng: np.random.Generator) -> ParticleBelief:
    """Uniformly weighted draws from a Gaussian belief."""
    weights, log_weights = _uniform(count)
    return ParticleBelief(sample_gaussian(bel, count, rng), weights, log_weights)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Low-variance resampling: N ancestor indices for N normalized weights."""
    n = weights.shape[0]
    positions = (rng.uniform() + np.arange(n)) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.minimum(np.searchsorted(cumulative, positions, side="right"), n - 1)


def soft_resample(bel: ParticleBelief, alpha_re: float, rng: np.random.Generator) -> ParticleBelief:
    """Draw ancestors from q = alpha pi + (1 - alpha)/N and reweight by pi/q.

    The ancestor choice carries no gradient; the new weights are taped through pi.
    """
    if not 0.0 <= alpha_re <= 1.0:
        raise ConfigurationError(f"alpha_re must lie in [0, 1], got {alpha_re}")
    n = bel.count
    q = bel.weights * alpha_re + (1.0 - alpha_re) / n
    idx = systematic_resample(q.data.astype(np.float64), rng)
    ratio = ad.take(bel.weights, idx) / ad.take(q, idx)
    weights = ratio / ad.reduce_sum(ratio)
    return ParticleBelief(ad.take(bel.particles, idx), weights, ad.log(weights + _tiny()))


def _predict(bel: ParticleBelief, u: Optional[TensorLike], models: BoundModels,
             rng: np.random.Generator) -> Tensor:
    moved = models.process(bel.particles, u)
    n, dim = bel.count, moved.shape[1]
    eta = rng.standard_normal((n, dim))
    if models.models.q.spec.flavor == "heteroscedastic":
        covs = models.models.q.materialize(models.params, models.models.q.entries(models.params, bel.particles))
        roots = ad.cholesky(covs)
        noise = ad.reshape(ad.matmul(roots, eta[:, :, None]), (n, dim))
    else:
        noise = ad.matmul(eta, ad.transpose(ad.cholesky(models.process_noise())))
    return moved + noise


def pf_step(bel: ParticleBelief, obs: Observation, u: Optional[TensorLike], models: BoundModels,
            config: FilterConfig, rng: np.random.Generator, step_index: int
            ) -> Tuple[ParticleBelief, StepDiagnostics]:
    resampled = config.resample and step_index % config.resample_every == 0
    if resampled:
        bel = soft_resample(bel, config.alpha_re, rng)

    particles = _predict(bel, u, models, rng)

    if config.pf_update == "learned":
        if obs.encoding is None:
            raise ConfigurationError("the learned particle update needs a sensor encoding")
        log_lik = models.likelihood_log(obs.encoding, particles)
    else:
        log_lik = gaussian_log_likelihood(obs.z - models.observe_h(particles), obs.r)

    log_w = ad.log(bel.weights + _tiny()) + log_lik
    # every weight zero (or undefined) after the update
    reset = bool(np.any(np.isnan(log_w.data))) or not np.isfinite(float(np.max(log_w.data)))
    if reset:
        logger.warning(f"particle weights degenerated at step {step_index}, resetting to uniform")
        weights, log_weights = _uniform(bel.count)
    else:
        log_weights = log_w - ad.logsumexp(log_w, axis=-1)
        weights = ad.softmax(log_w, axis=-1)

    new = ParticleBelief(particles, weights, log_weights)
    innovation = obs.z.data - models.h @ new.mean().data
    return new, StepDiagnostics(innovation_norm=float(np.linalg.norm(innovation)), ess=new.ess(),
                                resampled=resampled, weights_reset=reset)


def particle_belief_summary(bel: ParticleBelief, mode: str, gmm_sigma: float = 1.0,
                            eps: Optional[float] = None) -> Union[GaussianBelief, GaussianMixture]:
    if mode == "single-gaussian":
        return fit_gaussian(bel.particles, bel.weights, eps)
    if mode == "gmm":
        n = bel.particles.shape[1]
        return GaussianMixture(bel.weights, bel.particles, ad.constant(np.eye(n) * gmm_sigma ** 2))
    raise ConfigurationError(f"unknown particle belief mode '{mode}'")
