import numpy as np
import pytest

from app.core.errors import ConfigurationError, DataError
from app.models.bundle import FilterModels, ModelOptions, disc_models_spec
from app.services.discworld import NoiseRegime, simulate_sequence
from app.services.filter_config import FilterConfig
from app.services.runner import initial_belief, perturb_initial_state, run_filter


def _disc_models() -> FilterModels:
    return FilterModels(disc_models_spec(ModelOptions(image_size=16, process="analytic"), seed=0))


@pytest.mark.parametrize("kind", ["ekf", "ukf", "mcukf", "pf"])
def test_single_step_sequence(tiny_scene, kind):
    record = simulate_sequence(tiny_scene, NoiseRegime(), length=1, seed=0)
    config = FilterConfig(kind=kind, sample_count_train=8, sample_count_eval=8)
    run = run_filter(record, initial_belief(record.states[0], np.eye(4)), config, _disc_models().bind(None),
                     np.random.default_rng(0))
    assert len(run.beliefs) == 1
    assert len(run.step_losses) == 1
    assert run.mean_array().shape == (1, 4)
    assert np.isfinite(run.loss.item())


def test_chunk_window_uses_matching_labels(tiny_scene):
    record = simulate_sequence(tiny_scene, NoiseRegime(), length=6, seed=1)
    run = run_filter(record, initial_belief(record.states[2], np.eye(4)), FilterConfig(),
                     _disc_models().bind(None), start=2, length=3)
    assert len(run.means) == 3
    assert len(run.observations) == 3


def test_out_of_range_window_is_a_data_error(tiny_scene):
    record = simulate_sequence(tiny_scene, NoiseRegime(), length=4, seed=0)
    bel = initial_belief(record.states[0], np.eye(4))
    with pytest.raises(DataError):
        run_filter(record, bel, FilterConfig(), _disc_models().bind(None), start=2, length=5)
    with pytest.raises(DataError):
        run_filter(record, bel, FilterConfig(), _disc_models().bind(None), observations=[])


def test_run_needs_observations():
    with pytest.raises(ConfigurationError):
        run_filter(None, initial_belief(np.zeros(4), np.eye(4)), FilterConfig(), _disc_models().bind(None))


def test_label_count_must_match(linear_system):
    bound = linear_system.models.bind(None)
    observations = bound.observations_from_z(linear_system.zs)
    bel = initial_belief(linear_system.mean0, linear_system.cov0)
    with pytest.raises(DataError):
        run_filter(None, bel, FilterConfig(), bound, observations=observations, labels=linear_system.states[1:4])


def test_exact_filters_agree_on_linear_system(linear_system):
    bound = linear_system.models.bind(None)
    observations = bound.observations_from_z(linear_system.zs)
    bel = initial_belief(linear_system.mean0, linear_system.cov0)
    ekf = run_filter(None, bel, FilterConfig(kind="ekf"), bound, observations=observations)
    ukf = run_filter(None, bel, FilterConfig(kind="ukf"), bound, observations=observations)
    np.testing.assert_allclose(ukf.mean_array(), ekf.mean_array(), atol=1e-8)
    assert ekf.loss is None


def test_perturbation_with_zero_covariance_keeps_x0():
    x0 = np.array([1.0, -2.0, 0.5, 0.0])
    bel = perturb_initial_state(x0, np.zeros((4, 4)), np.random.default_rng(0))
    np.testing.assert_array_equal(bel.mean.data, x0)


def test_perturbation_shape_mismatch():
    with pytest.raises(DataError):
        perturb_initial_state(np.zeros(4), np.eye(2), np.random.default_rng(0))


def test_perturbation_statistics():
    cov = np.diag([4.0, 1.0])
    rng = np.random.default_rng(0)
    draws = np.stack([perturb_initial_state(np.zeros(2), cov, rng).mean.data for _ in range(20_000)])
    np.testing.assert_allclose(np.cov(draws.T), cov, atol=0.15)
