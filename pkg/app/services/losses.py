"""Training losses over a sequence of beliefs."""

from typing import List, Sequence, Union

import numpy as np

from app.core import autodiff as ad
from app.core.autodiff import Tensor, TensorLike
from app.core.errors import ConfigurationError
from app.core.gaussian import GaussianBelief, GaussianMixture, gaussian_nll, gmm_nll

Summary = Union[GaussianBelief, GaussianMixture]


def step_mse(mean: Tensor, label: TensorLike) -> Tensor:
    r = ad.as_tensor(label) - mean
    return ad.reduce_sum(ad.square(r))


def step_nll(summary: Summary, label: TensorLike) -> Tensor:
    if isinstance(summary, GaussianMixture):
        return gmm_nll(label, summary)
    return gaussian_nll(label, summary)


def step_loss(kind: str, mean: Tensor, summary: Summary, label: TensorLike) -> Tensor:
    if kind == "mse":
        return step_mse(mean, label)
    if kind == "nll":
        return step_nll(summary, label)
    if kind == "mix":
        return (step_mse(mean, label) + step_nll(summary, label)) * 0.5
    raise ConfigurationError(f"unknown loss '{kind}'")


def _average(terms: List[Tensor]) -> Tensor:
    return ad.reduce_mean(ad.stack(terms))


def loss_mse(means: Sequence[Tensor], labels) -> Tensor:
    """(1/T) sum_t |x_t - mu_t|^2"""
    labels = np.asarray(labels)
    return _average([step_mse(m, labels[t]) for t, m in enumerate(means)])


def loss_nll(summaries: Sequence[Summary], labels) -> Tensor:
    labels = np.asarray(labels)
    return _average([step_nll(s, labels[t]) for t, s in enumerate(summaries)])


def loss_mix(means: Sequence[Tensor], summaries: Sequence[Summary], labels) -> Tensor:
    return (loss_mse(means, labels) + loss_nll(summaries, labels)) * 0.5
