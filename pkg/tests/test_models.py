import numpy as np
import pytest

from app.core import autodiff as ad
from app.core.autodiff import Tape
from app.core.errors import ConfigurationError, ShapeError
from app.core.gradcheck import gradient_check
from app.models.bundle import FilterModels, ModelOptions, ModelsSpec, disc_models_spec, observation_model_h
from app.models.likelihood import likelihood_forward
from app.models.noise import NoiseModel, NoiseSpec, process_noise
from app.models.process import ProcessModel, ProcessSpec, disc_process_analytic, process_forward


def _models(**options) -> FilterModels:
    return FilterModels(disc_models_spec(ModelOptions(image_size=16, **options), seed=1))


def _images(count: int = 3) -> np.ndarray:
    return np.random.default_rng(0).integers(0, 256, size=(count, 16, 16, 3), dtype=np.uint8)


def test_observation_model_selects_positions():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(observation_model_h(x).data, [1.0, 2.0])
    np.testing.assert_array_equal(observation_model_h(2.5 * x).data, 2.5 * observation_model_h(x).data)
    np.testing.assert_array_equal(ad.jacobian(observation_model_h, x), [[1, 0, 0, 0], [0, 1, 0, 0]])


def test_disc_dynamics_examples():
    np.testing.assert_allclose(disc_process_analytic(np.array([10.0, 0.0, 2.0, 0.0])).data, [12.0, 0.0, 1.47, 0.0])
    np.testing.assert_array_equal(disc_process_analytic(np.zeros(4)).data, np.zeros(4))
    x = np.array([3.0, -7.0, 1.5, 2.5])
    np.testing.assert_allclose(disc_process_analytic(-x).data, -disc_process_analytic(x).data)


def test_untrained_process_net_is_identity():
    models = _models(process="learned")
    x = np.random.default_rng(0).normal(size=(5, 4)) * 10.0
    np.testing.assert_allclose(models.bind(None).process(x).data, x)


def test_process_net_jacobian_gradient_check():
    spec = ProcessSpec(kind="learned", hidden=[8])
    model = ProcessModel(spec)
    params = FilterModels(ModelsSpec(process=spec, seed=2)).params
    rng = np.random.default_rng(3)
    bound = {n: ad.constant(v + rng.normal(scale=0.3, size=v.shape)) for n, v in params.values.items()}
    w = rng.normal(size=4)
    check = gradient_check(lambda x: (process_forward(model, bound, x) * w).sum(), rng.normal(size=4))
    assert check.passed


def test_linear_process_uses_matrix():
    a = [[1.0, 1.0], [0.0, 1.0]]
    models = FilterModels(ModelsSpec(
        state_dim=2, obs_dim=1, observation_matrix=[[1.0, 0.0]],
        process=ProcessSpec(kind="linear", state_dim=2, matrix=a),
        q=NoiseSpec(name="q", dim=2, target=[1.0]), r=NoiseSpec(name="r", dim=1, target=[1.0]),
    ))
    np.testing.assert_allclose(models.bind(None).process(np.array([1.0, 2.0])).data, [3.0, 2.0])


def test_initial_noise_matches_targets():
    bound = _models().bind(None)
    np.testing.assert_allclose(bound.process_noise().data, 100.0 * np.eye(4), atol=1e-9)
    obs = bound.observe(_images())
    for o in obs:
        np.testing.assert_allclose(o.r.data, 900.0 * np.eye(2), atol=1e-9)


def test_heteroscedastic_noise_starts_at_target():
    bound = _models(hetero_q=True, hetero_r=True, full_cov=True, q_init=4.0, r_init=9.0).bind(None)
    x = np.random.default_rng(1).normal(size=(6, 4))
    np.testing.assert_allclose(bound.process_noise(x[0]).data, 4.0 * np.eye(4), atol=1e-9)
    for o in bound.observe(_images(2)):
        np.testing.assert_allclose(o.r.data, 9.0 * np.eye(2), atol=1e-9)


def test_heteroscedastic_weighted_average():
    spec = NoiseSpec(name="q", dim=4, flavor="heteroscedastic", target=[2.0], input_dim=4, hidden=[5])
    model = NoiseModel(spec)
    params = FilterModels(ModelsSpec(q=spec)).params
    rng = np.random.default_rng(4)
    bound = {n: ad.constant(v + rng.normal(scale=0.5, size=v.shape)) for n, v in params.values.items()}
    points = rng.normal(size=(3, 4))

    same = process_noise(model, bound, np.stack([points[0]] * 3), np.full(3, 1.0 / 3))
    np.testing.assert_allclose(same.data, process_noise(model, bound, points[0]).data, atol=1e-12)
    first = process_noise(model, bound, points, np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(first.data, process_noise(model, bound, points[0]).data, atol=1e-12)
    with pytest.raises(ShapeError):
        process_noise(model, bound, points, np.ones(2))


def test_sensor_output_shapes_and_gradients():
    models = _models()
    tape = Tape()
    bound = models.bind(tape)
    obs = bound.observe(_images(2))
    assert len(obs) == 2
    assert obs[0].z.shape == (2,)
    assert obs[0].encoding.shape == (32,)
    loss = ad.square(obs[0].z).sum() + ad.square(obs[1].z).sum()
    grads = ad.backward(tape, loss)
    assert np.any(grads[bound.params["sensor.conv1.w"]] != 0)


def test_sensor_rejects_wrong_image_size():
    with pytest.raises(ShapeError):
        _models().bind(None).observe(np.zeros((1, 20, 20, 3), dtype=np.uint8))


def test_heteroscedastic_r_needs_a_sensor():
    with pytest.raises(ConfigurationError):
        FilterModels(ModelsSpec(r=NoiseSpec(name="r", dim=2, flavor="heteroscedastic", target=[1.0])))


def test_likelihood_is_positive_and_symmetric_in_particles():
    models = _models(learned_likelihood=True)
    bound = models.bind(None)
    encoding = bound.observe(_images(1))[0].encoding
    particles = np.tile([1.0, -2.0, 0.5, 0.5], (4, 1))
    lik = likelihood_forward(models.likelihood, bound.params, encoding, bound.observe_h(particles)).data
    assert lik.shape == (4,)
    np.testing.assert_allclose(lik, lik[0])
    random = np.random.default_rng(5).normal(scale=10.0, size=(10_000, 4))
    lik = likelihood_forward(models.likelihood, bound.params, encoding, bound.observe_h(random)).data
    assert np.all(lik > 0)
