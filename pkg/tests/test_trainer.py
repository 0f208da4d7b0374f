import csv
import os

import numpy as np
import pytest

from app.core.errors import ConfigurationError, DivergenceError
from app.models.bundle import FilterModels, ModelOptions, disc_models_spec
from app.models.checkpoint import load_checkpoint
from app.services.dataset_store import read_split
from app.services.filter_config import FilterConfig
from app.services.trainer import (LOG_COLUMNS, PretrainConfig, TrainConfig, Trainer, apply_preset,
                                  freeze_components, make_batches, make_chunks, parallel_gradients,
                                  pretrain_sensor, transfer_params)


def _models(**options) -> FilterModels:
    return FilterModels(disc_models_spec(ModelOptions(image_size=16, **options), seed=0))


def _splits(directory):
    _, train = read_split(os.path.join(directory, "train.dfds"))
    _, val = read_split(os.path.join(directory, "val.dfds"))
    return train, val


def test_chunking_conserves_steps():
    chunks = make_chunks([50, 50, 7], 10)
    assert sum(c.length for c in chunks) == 107
    assert [c.length for c in chunks if c.sequence == 2] == [7]
    chunks = make_chunks([50], 25)
    assert [(c.start, c.length) for c in chunks] == [(0, 25), (25, 25)]
    with pytest.raises(ConfigurationError):
        make_chunks([5], 0)


def test_last_chunk_may_be_shorter():
    chunks = make_chunks([12], 5)
    assert [(c.start, c.length) for c in chunks] == [(0, 5), (5, 5), (10, 2)]


def test_chunks_per_batch_keeps_steps_per_batch():
    assert TrainConfig(seq_len=10, batch_size=32, reference_seq_len=10).chunks_per_batch == 32
    assert TrainConfig(seq_len=50, batch_size=32, reference_seq_len=10).chunks_per_batch == 6
    assert TrainConfig(seq_len=1, batch_size=32, reference_seq_len=10).chunks_per_batch == 320
    assert TrainConfig(seq_len=500, batch_size=1, reference_seq_len=10).chunks_per_batch == 1


def test_batches_cover_every_chunk_once():
    chunks = make_chunks([10, 10, 10], 3)
    batches = make_batches(chunks, 4, np.random.default_rng(0))
    flat = [c for b in batches for c in b]
    assert sorted(flat, key=lambda c: (c.sequence, c.start)) == chunks
    assert all(len(b) <= 4 for b in batches)


def test_init_cov_validation():
    assert np.array_equal(TrainConfig(init_cov_diag=[4.0]).init_cov(2), np.diag([4.0, 4.0]))
    with pytest.raises(ConfigurationError):
        TrainConfig(init_cov_diag=[1.0, 2.0, 3.0]).init_cov(4)
    with pytest.raises(ConfigurationError):
        TrainConfig(init_cov_diag=[0.0]).init_cov(4)


def test_presets():
    options = apply_preset(ModelOptions(), "noise-only")
    assert (options.q_init, options.r_init, options.process) == (1.0, 100.0, "analytic")
    options = apply_preset(ModelOptions(), "from-scratch")
    assert (options.q_init, options.r_init, options.process) == (100.0, 900.0, "learned")


def test_freezing_sensor_features_keeps_r_head_trainable():
    models = _models()
    freeze_components(models, sensor=True, process=True)
    trainable = models.params.trainable_names()
    assert not any(n.startswith(("sensor.conv", "sensor.fc", "sensor.z", "process.")) for n in trainable)
    assert any(n.startswith("q.") for n in trainable)


def test_everything_frozen_is_a_configuration_error():
    models = _models()
    for prefix in ("sensor.", "process.", "q.", "r."):
        models.freeze(prefix)
    with pytest.raises(ConfigurationError):
        parallel_gradients(models, [lambda bound: bound.process_noise().sum()], threads=1)


def test_transfer_params_copies_matching_tensors():
    src, dst = _models(), FilterModels(disc_models_spec(ModelOptions(image_size=16), seed=5))
    copied = transfer_params(dst.params, src.params, ["sensor."], skip=["sensor.r"])
    assert copied
    assert all(n.startswith("sensor.") and not n.startswith("sensor.r") for n in copied)
    for name in copied:
        np.testing.assert_array_equal(dst.params.values[name], src.params.values[name])


def test_parallel_gradients_average_in_order():
    models = _models(process="analytic")
    task_a = lambda bound: bound.process_noise().sum()
    task_b = lambda bound: bound.process_noise().sum() * 3.0
    loss, grads = parallel_gradients(models, [task_a, task_b], threads=2)
    single, single_grads = parallel_gradients(models, [task_a], threads=1)
    assert loss == pytest.approx(2.0 * single)
    for name, g in grads.items():
        np.testing.assert_allclose(g, 2.0 * single_grads[name])


def test_tiny_training_run_writes_log_and_checkpoint(tiny_dataset, tmp_path):
    train, val = _splits(tiny_dataset)
    config = TrainConfig(seq_len=3, epochs=2, batch_size=2, reference_seq_len=3, lr=1e-3,
                         precision="float64", threads=2)
    out = str(tmp_path / "run")
    result = Trainer(_models(process="analytic"), FilterConfig(kind="ekf"), config, out).fit(train, val)

    assert result.epochs == 2
    assert result.steps == 8  # 8 chunks, 2 per batch, 2 epochs
    assert result.best_val_loss is not None and np.isfinite(result.best_val_loss)
    with open(result.log) as f:
        rows = list(csv.reader(f))
    assert rows[0] == LOG_COLUMNS
    assert len(rows) == result.steps + 1
    assert sum(1 for r in rows[1:] if r[3]) == 2
    manifest, params = load_checkpoint(result.checkpoint)
    assert manifest.step == result.best_step
    assert manifest.config["label"] == "ekf/nll/k3"
    assert set(params.values) == set(_models(process="analytic").params.values)


def test_training_is_reproducible(tiny_dataset, tmp_path):
    train, val = _splits(tiny_dataset)
    config = TrainConfig(seq_len=6, epochs=1, batch_size=4, reference_seq_len=6, precision="float64", threads=2)
    first = Trainer(_models(process="analytic"), FilterConfig(), config, str(tmp_path / "a")).fit(train, val)
    again = Trainer(_models(process="analytic"), FilterConfig(), config.model_copy(update={"threads": 1}),
                    str(tmp_path / "b")).fit(train, val)
    _, a = load_checkpoint(first.checkpoint)
    _, b = load_checkpoint(again.checkpoint)
    for name in a.values:
        np.testing.assert_array_equal(a.values[name], b.values[name])


def test_consecutive_non_finite_losses_diverge(tmp_path):
    config = TrainConfig(precision="float64", threads=1, divergence_patience=3)
    trainer = Trainer(_models(process="analytic"), FilterConfig(), config, str(tmp_path))
    trainer._watch(float("nan"), 1, 1, "train loss")
    trainer._watch(1.0, 1, 2, "train loss")
    trainer._watch(float("inf"), 1, 3, "train loss")
    trainer._watch(float("nan"), 1, 4, "train loss")
    with pytest.raises(DivergenceError):
        trainer._watch(float("nan"), 1, 5, "validation loss")


def test_pretrain_sensor_writes_checkpoint(tiny_dataset, tmp_path):
    train, val = _splits(tiny_dataset)
    models = _models()
    config = PretrainConfig(epochs=1, batch_size=8, lr=1e-3, precision="float64", threads=2)
    result = pretrain_sensor(models, train, val, config, str(tmp_path))
    assert os.path.exists(os.path.join(str(tmp_path), "sensor.dfck"))
    assert os.path.exists(os.path.join(str(tmp_path), "pretrain_log.csv"))
    assert result.steps == 3  # 24 frames in batches of 8
    assert "process." not in "".join(models.params.trainable_names())
