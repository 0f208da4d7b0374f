import math

import numpy as np
import pytest

from app.core import autodiff as ad
from app.core.errors import ConfigurationError
from app.core.gaussian import GaussianBelief
from app.models.bundle import Observation
from app.services.filter_config import FilterConfig, UkfParams
from app.services.kalman import ekf_step, mcukf_step, ukf_sigma_points, ukf_step, ukf_weights, unscented_transform


def _belief(mean, cov) -> GaussianBelief:
    return GaussianBelief(ad.constant(np.asarray(mean, dtype=float)), ad.constant(np.asarray(cov, dtype=float)))


def _obs(z, r) -> Observation:
    return Observation(z=ad.constant(np.asarray(z, dtype=float)), r=ad.constant(np.asarray(r, dtype=float)))


def test_ekf_scalar_update(make_scalar_models):
    """Prior 0.5 plus Q 0.5 predicts (0, 1); with R = 1 and z = 2: S = 2, K = 0.5."""
    bound = make_scalar_models(q=0.5, r=1.0).bind(None)
    bel, diag = ekf_step(_belief([0.0], [[0.5]]), _obs([2.0], [[1.0]]), None, bound)
    assert bel.mean.item() == pytest.approx(1.0)
    assert bel.cov.item() == pytest.approx(0.5)
    assert diag.innovation_norm == pytest.approx(2.0)


def test_ekf_ignores_uninformative_observation(make_scalar_models):
    bound = make_scalar_models(q=0.5).bind(None)
    bel, _ = ekf_step(_belief([3.0], [[0.5]]), _obs([100.0], [[1e12]]), None, bound)
    assert bel.mean.item() == pytest.approx(3.0, abs=1e-6)


def test_sigma_points_two_dimensional():
    params = UkfParams(alpha=1.0, kappa=1.0, beta=0.0)
    points, w_m, w_c = ukf_sigma_points(_belief(np.zeros(2), np.eye(2)), params)
    s = math.sqrt(3.0)
    expected = [[0, 0], [s, 0], [0, s], [-s, 0], [0, -s]]
    np.testing.assert_allclose(points.data, expected, atol=1e-12)
    np.testing.assert_allclose(w_m, [1 / 3] + [1 / 6] * 4)
    np.testing.assert_allclose(w_c, w_m)


def test_default_weights_are_uniform_in_four_dimensions():
    w_m, w_c = ukf_weights(4, UkfParams())
    np.testing.assert_allclose(w_m, np.full(9, 1.0 / 9.0))
    np.testing.assert_allclose(w_c, w_m)


@pytest.mark.parametrize("preset", ["paper", "julier", "scaled"])
def test_mean_weights_sum_to_one(preset):
    for n in (1, 2, 4):
        w_m, _ = ukf_weights(n, UkfParams(preset=preset))
        assert w_m.sum() == pytest.approx(1.0)


def test_scaled_preset_covariance_weight():
    params = UkfParams(preset="scaled")
    w_m, w_c = ukf_weights(4, params)
    assert w_c[0] == pytest.approx(w_m[0] + 1.0 - 0.25 + 2.0)


def test_kappa_below_minus_n_is_rejected():
    with pytest.raises(ConfigurationError):
        ukf_weights(4, UkfParams(kappa=-5.0))


def test_unscented_transform_affine_is_exact():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    c = rng.normal(size=3)
    root = rng.normal(size=(4, 4))
    bel = _belief(rng.normal(size=4), root @ root.T + np.eye(4))
    points, w_m, w_c = ukf_sigma_points(bel, UkfParams())
    mean, cov = unscented_transform(points, w_m, w_c, lambda x: ad.matmul(x, a.T) + c)
    np.testing.assert_allclose(mean.data, a @ bel.mean.data + c, atol=1e-8)
    np.testing.assert_allclose(cov.data, a @ bel.cov.data @ a.T, atol=1e-8)


def test_unscented_transform_identity_and_constant():
    bel = _belief([1.0, -2.0], [[2.0, 0.5], [0.5, 1.0]])
    points, w_m, w_c = ukf_sigma_points(bel, UkfParams())
    mean, cov = unscented_transform(points, w_m, w_c, lambda x: x)
    np.testing.assert_allclose(mean.data, bel.mean.data, atol=1e-12)
    np.testing.assert_allclose(cov.data, bel.cov.data, atol=1e-12)
    extra = np.diag([0.3, 0.7])
    mean, cov = unscented_transform(points, w_m, w_c, lambda x: x * 0.0 + 5.0, extra)
    np.testing.assert_allclose(cov.data, extra, atol=1e-12)


def test_ukf_matches_ekf_on_linear_scalar_system(make_scalar_models):
    bound = make_scalar_models(a=0.9, q=0.3, r=2.0).bind(None)
    bel = _belief([1.0], [[1.5]])
    obs = _obs([0.4], [[2.0]])
    ekf, _ = ekf_step(bel, obs, None, bound)
    ukf, _ = ukf_step(bel, obs, None, bound, UkfParams())
    assert ukf.mean.item() == pytest.approx(ekf.mean.item(), abs=1e-10)
    assert ukf.cov.item() == pytest.approx(ekf.cov.item(), abs=1e-10)


def test_ukf_zero_innovation_keeps_prediction(make_scalar_models):
    """z equal to the predicted observation leaves the predicted mean in place."""
    bound = make_scalar_models(a=0.5, q=0.2).bind(None)
    bel, _ = ukf_step(_belief([4.0], [[1.0]]), _obs([2.0], [[1.0]]), None, bound, UkfParams())
    assert bel.mean.item() == pytest.approx(2.0)


def test_mcukf_is_deterministic_per_seed(linear_system):
    bound = linear_system.models.bind(None)
    obs = bound.observations_from_z(linear_system.zs[:1])[0]
    bel = _belief(linear_system.mean0, linear_system.cov0)
    first, _ = mcukf_step(bel, obs, None, bound, 50, np.random.default_rng(7))
    again, _ = mcukf_step(bel, obs, None, bound, 50, np.random.default_rng(7))
    np.testing.assert_array_equal(first.mean.data, again.mean.data)
    np.testing.assert_array_equal(first.cov.data, again.cov.data)
    with pytest.raises(ConfigurationError):
        mcukf_step(bel, obs, None, bound, 1, np.random.default_rng(7))


def test_filter_config_defaults():
    config = FilterConfig(kind="mcukf")
    assert (config.sample_count_train, config.sample_count_eval) == (100, 500)
    assert config.sample_count(training=True) == 100
    assert FilterConfig(kind="pf", pf_belief="single-gaussian", pf_update="learned").label == "pf-g-lrn"
    assert FilterConfig(kind="pf").label == "pf-m"
    assert FilterConfig().ukf.alpha == 1.0 and FilterConfig().ukf.kappa == 0.5
