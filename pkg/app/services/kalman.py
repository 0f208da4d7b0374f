"""dEKF, dUKF and dMCUKF step functions.

Every step is written with taped ops: gradients reach the process, noise and sensor
parameters through the whole prediction/update chain.
"""

import logging
from typing import Callable, Optional, Tuple

import numpy as np

from app.core import autodiff as ad
from app.core.autodiff import Tensor, TensorLike
from app.core.errors import ConfigurationError, NumericError
from app.core.gaussian import GaussianBelief, matrix_sqrt_psd, sample_gaussian
from app.models.bundle import BoundModels, Observation
from app.services.filter_config import StepDiagnostics, UkfParams

logger = logging.getLogger(__name__)


def _gain(s: Tensor, cross: Tensor, step: str) -> Tensor:
    """K = C S^-1 for symmetric S, as (S^-1 C^T)^T."""
    try:
        return ad.transpose(ad.solve_spd(s, ad.transpose(cross)))
    except NumericError as e:
        logger.error(f"{step}: innovation covariance is not invertible")
        raise NumericError(f"{step}: innovation covariance is not invertible ({e})",
                           minor_index=e.minor_index, step=step) from e


def _innovation_norm(innovation: Tensor) -> float:
    return float(np.linalg.norm(innovation.data))


def ekf_step(bel: GaussianBelief, obs: Observation, u: Optional[TensorLike],
             models: BoundModels) -> Tuple[GaussianBelief, StepDiagnostics]:
    # prediction, linearized around the current mean
    mean_pred, f_jac = ad.linearize(lambda x: models.process(x, u), bel.mean)
    q = models.process_noise(bel.mean)
    cov_pred = ad.symmetrize(f_jac @ bel.cov @ ad.transpose(f_jac) + q)

    # update
    h = models.h
    s = ad.symmetrize(ad.matmul(ad.matmul(h, cov_pred), h.T) + obs.r)
    k = _gain(s, ad.matmul(cov_pred, h.T), "ekf.update")
    innovation = obs.z - ad.matmul(h, mean_pred)
    mean = mean_pred + ad.matmul(k, innovation)
    cov = ad.symmetrize(ad.matmul(np.eye(bel.dim) - ad.matmul(k, h), cov_pred))
    return GaussianBelief(mean, cov), StepDiagnostics(innovation_norm=_innovation_norm(innovation))


def ukf_weights(n: int, params: UkfParams) -> Tuple[np.ndarray, np.ndarray]:
    params.check(n)
    lam = params.lam(n)
    w_m = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
    w_c = w_m.copy()
    w_m[0] = lam / (n + lam)
    w_c[0] = w_m[0] + (1.0 - params.alpha ** 2 + params.beta)
    return w_m, w_c


def ukf_sigma_points(bel: GaussianBelief, params: UkfParams) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """2n+1 points mean, mean +- columns of sqrt((n + lambda) cov), with mean/cov weights."""
    n = bel.dim
    w_m, w_c = ukf_weights(n, params)
    root = matrix_sqrt_psd(bel.cov * (n + params.lam(n)))
    cols = ad.transpose(root)
    center = ad.reshape(bel.mean, (1, n))
    points = ad.concat([center, cols + bel.mean, bel.mean - cols], axis=0)
    return points, w_m, w_c


def _moments(points: Tensor, w_m: np.ndarray, w_c: np.ndarray) -> Tuple[Tensor, Tensor]:
    """Weighted mean and per-point deviations from it."""
    mean = ad.matmul(w_m, points)
    dev = points - mean
    return mean, dev


def _weighted_cov(dev_a: Tensor, dev_b: Tensor, w_c: np.ndarray) -> Tensor:
    return ad.matmul(ad.transpose(dev_a * w_c[:, None]), dev_b)


def unscented_transform(points: Tensor, w_m: np.ndarray, w_c: np.ndarray,
                        f: Callable[[Tensor], Tensor], additive_cov: Optional[TensorLike] = None
                        ) -> Tuple[Tensor, Tensor]:
    """Mean and covariance of f(points); f maps (N, n) -> (N, m)."""
    mean, cov, _ = _transform(points, w_m, w_c, f, additive_cov)
    return mean, cov


def _transform(points, w_m, w_c, f, additive_cov):
    y = f(points)
    mean, dev = _moments(y, w_m, w_c)
    cov = _weighted_cov(dev, dev, w_c)
    if additive_cov is not None:
        cov = cov + additive_cov
    return mean, ad.symmetrize(cov), dev


def _noise_weights(w_m: np.ndarray) -> np.ndarray:
    """Weights for averaging per-point Q; uniform when some w_m are negative."""
    if np.all(w_m >= 0):
        return w_m
    return np.full_like(w_m, 1.0 / w_m.size)


def _sigma_update(bel_pred: GaussianBelief, obs: Observation, models: BoundModels,
                  points: Tensor, w_m: np.ndarray, w_c: np.ndarray, step: str
                  ) -> Tuple[GaussianBelief, StepDiagnostics]:
    _, x_dev = _moments(points, w_m, w_c)
    z_hat, s, z_dev = _transform(points, w_m, w_c, models.observe_h, obs.r)
    cov_xx = _weighted_cov(x_dev, x_dev, w_c)
    cross = _weighted_cov(x_dev, z_dev, w_c)
    k = _gain(s, cross, step)
    innovation = obs.z - z_hat
    mean = bel_pred.mean + ad.matmul(k, innovation)
    cov = ad.symmetrize(cov_xx - ad.matmul(ad.matmul(k, s), ad.transpose(k)))
    return GaussianBelief(mean, cov), StepDiagnostics(innovation_norm=_innovation_norm(innovation))


def ukf_step(bel: GaussianBelief, obs: Observation, u: Optional[TensorLike], models: BoundModels,
             params: UkfParams) -> Tuple[GaussianBelief, StepDiagnostics]:
    points, w_m, w_c = ukf_sigma_points(bel, params)
    q = models.process_noise(points, _noise_weights(w_m))
    mean_pred, cov_pred, _ = _transform(points, w_m, w_c, lambda x: models.process(x, u), q)
    bel_pred = GaussianBelief(mean_pred, cov_pred)
    # update with sigma points redrawn from the predicted belief
    points, _, _ = ukf_sigma_points(bel_pred, params)
    return _sigma_update(bel_pred, obs, models, points, w_m, w_c, "ukf.update")


def mcukf_step(bel: GaussianBelief, obs: Observation, u: Optional[TensorLike], models: BoundModels,
               count: int, rng: np.random.Generator) -> Tuple[GaussianBelief, StepDiagnostics]:
    if count < 2:
        raise ConfigurationError(f"the MCUKF needs at least 2 samples, got {count}")
    w = np.full(count, 1.0 / count)
    points = sample_gaussian(bel, count, rng)
    q = models.process_noise(points, w)
    mean_pred, cov_pred, _ = _transform(points, w, w, lambda x: models.process(x, u), q)
    bel_pred = GaussianBelief(mean_pred, cov_pred)
    points = sample_gaussian(bel_pred, count, rng)
    return _sigma_update(bel_pred, obs, models, points, w, w, "mcukf.update")
