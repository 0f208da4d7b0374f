"""Gaussian primitives shared by the filters, losses and noise models.

All functions accept Tensors (taped or not) or plain arrays and return Tensors, so they can
sit anywhere inside a taped computation.
"""

import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from app.core import autodiff as ad
from app.core.autodiff import Tensor, TensorLike
from app.core.config import settings
from app.core.errors import ConfigurationError, NumericError, ShapeError

logger = logging.getLogger(__name__)

CovMode = Literal["diagonal", "full"]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianBelief:
    mean: Tensor
    cov: Tensor

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def validate(self, tol: float = 1e-9) -> "GaussianBelief":
        """Raise NumericError unless cov is symmetric and Cholesky succeeds."""
        c = self.cov.data
        if c.shape != (self.dim, self.dim):
            raise ShapeError(f"belief covariance {c.shape} does not match mean {self.mean.shape}")
        asym = float(np.max(np.abs(c - c.T))) if c.size else 0.0
        if asym > tol * max(1.0, float(np.max(np.abs(c)))):
            raise NumericError(f"belief covariance is not symmetric (max deviation {asym:.3e})")
        ad._cholesky_array(c, "belief")
        return self

    def detach(self) -> "GaussianBelief":
        return GaussianBelief(ad.constant(self.mean), ad.constant(self.cov))


@dataclass
class GaussianMixture:
    """Equal-shape components sharing one covariance: weights (N,), means (N, n), cov (n, n)."""

    weights: Tensor
    means: Tensor
    cov: Tensor

    def validate(self, tol: float = 1e-9) -> "GaussianMixture":
        w = self.weights.data
        if np.any(w < 0) or abs(float(w.sum()) - 1.0) > tol:
            raise NumericError(f"mixture weights must be nonnegative and sum to 1 (sum={float(w.sum())})")
        return self


@dataclass
class TriangularNoiseParam:
    """Pre-bias noise entries.

    diagonal mode: entries (..., n) are the diagonal values d.
    full mode: entries (..., n(n+1)/2) fill an upper-triangular factor row by row; the
    diagonal positions hold d.
    """

    entries: Tensor
    bias: Tensor
    mode: CovMode = "diagonal"
    eps: float = 1e-3

    def materialize(self) -> Tensor:
        return materialize_cov(self.entries, self.mode, self.bias, self.eps)


def tri_size(n: int) -> int:
    return n * (n + 1) // 2


def tri_dim(k: int) -> int:
    """Inverse of tri_size."""
    n = int(round((math.sqrt(8 * k + 1) - 1) / 2))
    if tri_size(n) != k:
        raise ShapeError(f"{k} entries do not fill an upper-triangular matrix")
    return n


def _upper_scatter(n: int) -> np.ndarray:
    """(n*n, n(n+1)/2) matrix placing packed entries into row-major upper-triangular slots."""
    rows, cols = np.triu_indices(n)
    m = np.zeros((n * n, tri_size(n)))
    m[rows * n + cols, np.arange(tri_size(n))] = 1.0
    return m


def upper_from_packed(v: TensorLike, n: int) -> Tensor:
    v = ad.as_tensor(v)
    if v.shape[-1] != tri_size(n):
        raise ShapeError(f"expected {tri_size(n)} packed entries for n={n}, got {v.shape[-1]}")
    flat = ad.matmul(v, _upper_scatter(n).T)
    return ad.reshape(flat, v.shape[:-1] + (n, n))


def diag_positions(n: int) -> np.ndarray:
    """Indices of the diagonal entries inside a packed upper-triangular vector."""
    rows, cols = np.triu_indices(n)
    return np.flatnonzero(rows == cols)


def bias_for_target(target_diag, eps: Optional[float] = None) -> np.ndarray:
    """Bias that makes a zero network output materialize to `target_diag`."""
    eps = settings.noise_eps if eps is None else eps
    target = np.asarray(target_diag, dtype=np.float64)
    if np.any(target < eps):
        raise ConfigurationError(f"noise target {target} is below the diagonal floor {eps}")
    return np.sqrt(target - eps)


def materialize_cov(entries: TensorLike, mode: CovMode, bias: TensorLike, eps: float) -> Tensor:
    """Covariance from pre-bias entries.

    diagonal: diag((d + b)^2 + eps)
    full:     L L^T + eps I, L upper-triangular with L_ii = d_i + b_i
    Leading batch dimensions are carried through.
    """
    entries, bias = ad.as_tensor(entries), ad.as_tensor(bias)
    if eps < 0:
        raise ConfigurationError(f"eps must be nonnegative, got {eps}")
    n = bias.shape[-1]
    if mode == "diagonal":
        if entries.shape[-1] != n:
            raise ShapeError(f"diagonal noise expects {n} entries, got {entries.shape[-1]}")
        return ad.diag_embed(ad.square(entries + bias) + eps)
    if mode == "full":
        upper = upper_from_packed(entries, n) + ad.diag_embed(bias)
        cov = ad.matmul(upper, ad.transpose(upper))
        return ad.symmetrize(cov) + np.eye(n) * eps
    raise ConfigurationError(f"unknown covariance mode '{mode}'")


def _half_logdet_from_factor(l: Tensor) -> Tensor:
    return ad.reduce_sum(ad.log(ad.diagonal(l)), axis=-1)


def _shared_mahalanobis(residuals: Tensor, l: Tensor) -> Tensor:
    """Squared Mahalanobis norms of residual rows (N, n) under L L^T."""
    y = ad.triangular_solve(l, ad.transpose(residuals))
    return ad.reduce_sum(ad.square(y), axis=0)


def gaussian_nll(x: TensorLike, bel: GaussianBelief) -> Tensor:
    """1/2 [log|S| + r^T S^-1 r], r = x - mean, without the 2 pi constant."""
    x = ad.as_tensor(x)
    r = x - bel.mean
    l = ad.cholesky(bel.cov)
    y = ad.triangular_solve(l, r)
    maha = ad.reduce_sum(ad.square(y), axis=-1)
    return _half_logdet_from_factor(l) + maha * 0.5


def gaussian_log_likelihood(residuals: TensorLike, cov: TensorLike) -> Tensor:
    """Normalized log density (2 pi included) of each residual row under N(0, cov)."""
    residuals, cov = ad.as_tensor(residuals), ad.as_tensor(cov)
    l = ad.cholesky(cov)
    maha = _shared_mahalanobis(residuals, l)
    n = residuals.shape[-1]
    return (maha * -0.5 - _half_logdet_from_factor(l)) - 0.5 * n * LOG_2PI


def gmm_nll(x: TensorLike, mix: GaussianMixture) -> Tensor:
    """-log sum_i pi_i |S|^-1/2 exp(-1/2 d_i^T S^-1 d_i), stabilized with log-sum-exp."""
    x = ad.as_tensor(x)
    l = ad.cholesky(mix.cov)
    maha = _shared_mahalanobis(x - mix.means, l)
    tiny = float(np.finfo(ad.default_dtype()).tiny)
    log_terms = ad.log(mix.weights + tiny) - maha * 0.5
    return _half_logdet_from_factor(l) - ad.logsumexp(log_terms, axis=-1)


def fit_gaussian(particles: TensorLike, weights: TensorLike, eps: Optional[float] = None) -> GaussianBelief:
    """Weighted moments of a particle set, covariance regularized by eps I."""
    eps = settings.noise_eps if eps is None else eps
    particles, weights = ad.as_tensor(particles), ad.as_tensor(weights)
    mean = ad.matmul(weights, particles)
    d = particles - mean
    weighted = d * ad.reshape(weights, (weights.shape[0], 1))
    cov = ad.symmetrize(ad.matmul(ad.transpose(weighted), d)) + np.eye(particles.shape[-1]) * eps
    return GaussianBelief(mean, cov)


def bhattacharyya(cov_a: TensorLike, cov_b: TensorLike) -> Tensor:
    """Bhattacharyya distance between N(0, cov_a) and N(0, cov_b)."""
    cov_a, cov_b = ad.as_tensor(cov_a), ad.as_tensor(cov_b)
    mid = (cov_a + cov_b) * 0.5
    return (ad.logdet(mid) - (ad.logdet(cov_a) + ad.logdet(cov_b)) * 0.5) * 0.5


def matrix_sqrt_psd(cov: TensorLike) -> Tensor:
    """Lower-triangular square root (Cholesky factor)."""
    return ad.cholesky(cov)


def sample_gaussian(bel: GaussianBelief, count: int, rng: np.random.Generator) -> Tensor:
    """count x n reparameterized draws mean + L eta; taped through mean and cov."""
    if count < 1:
        raise ConfigurationError(f"sample count must be >= 1, got {count}")
    eta = rng.standard_normal((count, bel.dim))
    l = matrix_sqrt_psd(bel.cov)
    return ad.matmul(eta, ad.transpose(l)) + bel.mean
