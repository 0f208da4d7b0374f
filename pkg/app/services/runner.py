"""Unrolls a filter over a sequence (or a chunk of one)."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from app.core import autodiff as ad
from app.core.autodiff import Tensor
from app.core.errors import ConfigurationError, DataError
from app.core.gaussian import GaussianBelief, GaussianMixture
from app.models.bundle import BoundModels, Observation
from app.services.discworld import SequenceRecord
from app.services.filter_config import FilterConfig, StepDiagnostics
from app.services.kalman import ekf_step, mcukf_step, ukf_step
from app.services.losses import step_loss
from app.services.particle import ParticleBelief, init_particles, particle_belief_summary, pf_step

logger = logging.getLogger(__name__)

Belief = Union[GaussianBelief, ParticleBelief]


@dataclass
class FilterRun:
    beliefs: List[Belief] = field(default_factory=list)
    summaries: List[Union[GaussianBelief, GaussianMixture]] = field(default_factory=list)
    means: List[Tensor] = field(default_factory=list)
    diagnostics: List[StepDiagnostics] = field(default_factory=list)
    step_losses: List[Tensor] = field(default_factory=list)
    observations: List[Observation] = field(default_factory=list)

    @property
    def loss(self) -> Optional[Tensor]:
        if not self.step_losses:
            return None
        return ad.reduce_mean(ad.stack(self.step_losses))

    def mean_array(self) -> np.ndarray:
        return np.stack([m.data for m in self.means]).astype(np.float64)


def initial_belief(x0, init_cov) -> GaussianBelief:
    return GaussianBelief(ad.constant(np.asarray(x0, dtype=np.float64)),
                          ad.constant(np.asarray(init_cov, dtype=np.float64)))


def perturb_initial_state(x0, init_cov, rng: np.random.Generator) -> GaussianBelief:
    """N(x0 + e, init_cov) with e ~ N(0, init_cov); a zero covariance leaves x0 untouched."""
    x0 = np.asarray(x0, dtype=np.float64)
    cov = np.asarray(init_cov, dtype=np.float64)
    if cov.shape != (x0.shape[0], x0.shape[0]):
        raise DataError(f"initial covariance {cov.shape} does not match state {x0.shape}")
    vals, vecs = np.linalg.eigh(cov)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return initial_belief(x0 + root @ rng.standard_normal(x0.shape[0]), cov)


def run_filter(sequence: Optional[SequenceRecord], init_bel: GaussianBelief, config: FilterConfig,
               models: BoundModels, rng: Optional[np.random.Generator] = None, *,
               start: int = 0, length: Optional[int] = None,
               observations: Optional[Sequence[Observation]] = None, labels=None,
               controls=None, training: bool = False) -> FilterRun:
    """Fold the configured step function over `length` steps starting after states[start].

    Observations default to one batched sensor pass over images[start:start+length]; labels
    default to states[start+1:start+1+length]. Per-step losses are recorded when labels exist.
    """
    if observations is None:
        if sequence is None:
            raise ConfigurationError("run_filter needs a sequence or explicit observations")
        stop = sequence.length if length is None else start + length
        if stop > sequence.length or start < 0 or stop <= start:
            raise DataError(f"steps {start}..{stop} out of range for a {sequence.length}-step sequence")
        observations = models.observe(sequence.images[start:stop])
        if labels is None:
            labels = sequence.states[start + 1:stop + 1]
    observations = list(observations)
    if not observations:
        raise DataError("cannot filter an empty sequence")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.float64)
        if labels.shape[0] != len(observations):
            raise DataError(f"{labels.shape[0]} labels for {len(observations)} observations")
    if config.kind == "ukf":
        config.ukf.check(init_bel.dim)
    rng = rng if rng is not None else np.random.default_rng(0)
    count = config.sample_count(training)

    run = FilterRun(observations=observations)
    bel: Belief = init_bel
    if config.kind == "pf":
        bel = init_particles(init_bel, count, rng)
    for t, obs in enumerate(observations):
        u = None if controls is None else controls[t]
        if config.kind == "ekf":
            bel, diag = ekf_step(bel, obs, u, models)
        elif config.kind == "ukf":
            bel, diag = ukf_step(bel, obs, u, models, config.ukf)
        elif config.kind == "mcukf":
            bel, diag = mcukf_step(bel, obs, u, models, count, rng)
        else:
            bel, diag = pf_step(bel, obs, u, models, config, rng, t)
        if isinstance(bel, ParticleBelief):
            summary = particle_belief_summary(bel, config.pf_belief, config.gmm_sigma)
            mean = bel.mean()
        else:
            summary, mean = bel, bel.mean
        run.beliefs.append(bel)
        run.summaries.append(summary)
        run.means.append(mean)
        run.diagnostics.append(diag)
        if labels is not None:
            run.step_losses.append(step_loss(config.loss, mean, summary, labels[t]))
    return run
