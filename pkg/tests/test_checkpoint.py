import numpy as np
import pytest

from app.core.errors import DataError
from app.models.checkpoint import load_checkpoint, save_checkpoint
from app.models.nn import LayerSpec, ParameterSet


def _params() -> ParameterSet:
    params = ParameterSet()
    params.add("process.fc1.w", np.arange(6.0).reshape(2, 3) / 7.0)
    params.add("process.fc1.b", np.array([0.5, -0.25]))
    params.add("q.bias", np.array(3.0), trainable=False)
    return params


def test_checkpoint_round_trip(tmp_path):
    path = str(tmp_path / "model.dfck")
    layers = [LayerSpec(name="process.fc1", in_size=3, out_size=2)]
    save_checkpoint(path, _params(), layers, seed=7, step=12, config={"label": "ekf/nll/k10"})
    manifest, params = load_checkpoint(path)
    assert manifest.seed == 7
    assert manifest.step == 12
    assert manifest.layers[0].name == "process.fc1"
    assert manifest.config["label"] == "ekf/nll/k10"
    assert list(params.values) == ["process.fc1.w", "process.fc1.b", "q.bias"]
    assert params.frozen == {"q.bias"}
    original = _params()
    for name, value in params.values.items():
        np.testing.assert_allclose(value, original.values[name], rtol=1e-7)


def test_truncated_checkpoint_is_a_data_error(tmp_path):
    path = tmp_path / "model.dfck"
    save_checkpoint(str(path), _params(), [])
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(str(path))


def test_trailing_bytes_are_a_data_error(tmp_path):
    path = tmp_path / "model.dfck"
    save_checkpoint(str(path), _params(), [])
    path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(DataError):
        load_checkpoint(str(path))


def test_foreign_file_is_a_data_error(tmp_path):
    path = tmp_path / "notes.dfck"
    path.write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(DataError):
        load_checkpoint(str(path))
    with pytest.raises(DataError):
        load_checkpoint(str(tmp_path / "missing.dfck"))
