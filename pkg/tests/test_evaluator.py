import csv
import os

import numpy as np
import pytest

from app.core.errors import DataError
from app.core.gaussian import LOG_2PI
from app.models.bundle import FilterModels, ModelOptions, disc_models_spec
from app.models.checkpoint import save_checkpoint
from app.services.dataset_store import read_split
from app.services.discworld import NoiseRegime, SceneSpec, simulate_sequence
from app.services.evaluator import (EvalConfig, evaluate, ground_truth_q_mean, learned_q_mean, load_trained,
                                    noise_distance, pearson)
from app.services.filter_config import FilterConfig


def _models(**options) -> FilterModels:
    return FilterModels(disc_models_spec(ModelOptions(image_size=16, process="analytic", **options), seed=0))


def test_pearson_matches_numpy():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=50), rng.normal(size=50)
    assert pearson(a, b) == pytest.approx(np.corrcoef(a, b)[0, 1])
    assert pearson(a, 2.0 * a + 1.0) == pytest.approx(1.0)
    assert pearson(a, -a) == pytest.approx(-1.0)


def test_pearson_undefined_for_constant_input():
    assert pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) is None
    assert pearson([1.0], [2.0]) is None


def test_evaluate_tiny_split(tiny_dataset, tmp_path):
    _, records = read_split(os.path.join(tiny_dataset, "test.dfds"))
    traces = str(tmp_path / "traces.csv")
    report = evaluate(records, _models(), FilterConfig(kind="ekf"), EvalConfig(eval_seeds=[1, 2], threads=2),
                      label="ekf-test", traces_path=traces)
    assert report.label == "ekf-test"
    assert report.sequences == 2
    assert report.runs == 6
    assert np.isfinite(report.rmse) and report.rmse <= report.rmse_state
    assert report.nll_with_2pi == pytest.approx(report.nll + 0.5 * 4 * LOG_2PI)
    # constant R has no variance to correlate
    assert report.corr_R_visibility is None
    assert report.corr_undefined
    assert report.D_Q is not None and report.D_Q > 0
    with open(traces) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["t", "rmse", "nll", "sigma_qp_pred", "sigma_qv_pred"]
    assert len(rows) == 1 + 6
    assert float(rows[1][3]) == pytest.approx(10.0)


def test_evaluate_is_deterministic(tiny_dataset):
    _, records = read_split(os.path.join(tiny_dataset, "test.dfds"))
    config = EvalConfig(eval_seeds=[3])
    first = evaluate(records, _models(), FilterConfig(kind="pf", sample_count_eval=16), config)
    again = evaluate(records, _models(), FilterConfig(kind="pf", sample_count_eval=16),
                     config.model_copy(update={"threads": 1}))
    assert first.rmse == again.rmse
    assert first.nll == again.nll
    assert first.diagnostics.mean_ess is not None
    assert first.diagnostics.resample_steps == 2 * 2 * 6


def test_evaluate_empty_split():
    with pytest.raises(DataError):
        evaluate([], _models(), FilterConfig())


def test_noise_distance_against_ground_truth():
    scene = SceneSpec(image_size=16, num_distractors=0)
    records = [simulate_sequence(scene, NoiseRegime(), 4, seed=0)]
    bound = _models(q_init=1.0).bind(None)
    np.testing.assert_allclose(learned_q_mean(bound, records), np.eye(4), atol=1e-9)
    np.testing.assert_allclose(ground_truth_q_mean(records), np.diag([0.01, 0.01, 4.0, 4.0]))
    assert noise_distance(bound, records) > 0


def test_heteroscedastic_ground_truth_is_state_averaged():
    scene = SceneSpec(image_size=16, num_distractors=0)
    records = [simulate_sequence(scene, NoiseRegime(kind="heteroscedastic"), 5, seed=1)]
    q = ground_truth_q_mean(records)
    assert q[0, 0] == pytest.approx(0.01)
    assert 4.0 <= q[2, 2] <= 36.0


def test_load_trained_restores_models_and_filter(tmp_path):
    models = _models(hetero_q=True)
    filter_cfg = FilterConfig(kind="ukf", loss="mse")
    path = str(tmp_path / "checkpoint.dfck")
    save_checkpoint(path, models.params, models.layers(), seed=4, step=2,
                    config={"label": "x", "models": models.spec.model_dump(), "filter": filter_cfg.model_dump()})
    loaded, loaded_cfg, manifest = load_trained(path)
    assert loaded_cfg.kind == "ukf" and loaded_cfg.loss == "mse"
    assert loaded.spec.q.flavor == "heteroscedastic"
    assert manifest.seed == 4
    assert set(loaded.params.values) == set(models.params.values)


def test_load_trained_needs_configuration(tmp_path):
    models = _models()
    path = str(tmp_path / "bare.dfck")
    save_checkpoint(path, models.params, models.layers())
    with pytest.raises(DataError):
        load_trained(path)
