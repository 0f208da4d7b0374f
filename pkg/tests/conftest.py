import os

# tests run at 64-bit precision; must be set before app.core.config is imported
os.environ.setdefault("DFKIT_PRECISION", "float64")
os.environ.setdefault("DFKIT_THREADS", "2")

import numpy as np
import pytest

from app.core import autodiff as ad


@pytest.fixture(autouse=True)
def float64_precision():
    ad.set_precision("float64")
    yield
    ad.set_precision("float64")


@pytest.fixture
def tiny_scene():
    from app.services.discworld import SceneSpec

    return SceneSpec(image_size=16, num_distractors=1)


@pytest.fixture
def tiny_dataset(tmp_path, tiny_scene):
    """Directory with train/val/test splits of a few short 16x16 sequences."""
    from app.services.discworld import NoiseRegime, generate_dataset

    out = str(tmp_path / "data")
    generate_dataset(out, {"train": 4, "val": 2, "test": 2}, length=6, scene=tiny_scene,
                     regime=NoiseRegime(), seed=3, threads=2)
    return out


@pytest.fixture
def linear_system():
    from app.services.oracle import random_linear_system

    return random_linear_system(seed=0, steps=10)


def scalar_models(a: float = 1.0, q: float = 0.5, r: float = 1.0):
    """1-D linear system x' = a x + q, z = x + r."""
    from app.models.bundle import FilterModels, ModelsSpec
    from app.models.noise import NoiseSpec
    from app.models.process import ProcessSpec

    spec = ModelsSpec(
        state_dim=1,
        obs_dim=1,
        observation_matrix=[[1.0]],
        process=ProcessSpec(kind="linear", state_dim=1, matrix=[[a]]),
        q=NoiseSpec(name="q", dim=1, target=[q]),
        r=NoiseSpec(name="r", dim=1, target=[r]),
    )
    return FilterModels(spec)


@pytest.fixture
def make_scalar_models():
    return scalar_models


@pytest.fixture
def rng():
    return np.random.default_rng(0)
