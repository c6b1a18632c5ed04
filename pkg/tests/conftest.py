import numpy as np
import pytest

from mgpt.config import ModelConfig, ScaleConfig
from mgpt.data import SyntheticSpec, generate_synthetic
from mgpt.model import MGPT


def tiny_config(**overrides) -> ModelConfig:
    base = dict(d=4, max_len=8, orders=2, heads=2, n_layers=1,
                scales=[ScaleConfig(4, 2), ScaleConfig(2, 1)], init_std=0.5)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    # |V| = 6 items, |B| = 3 behaviors
    return MGPT(tiny_config(), n_items=6, n_behaviors=3, seed=7)


@pytest.fixture(scope="session")
def small_synth():
    spec = SyntheticSpec(n_users=30, n_items=12, min_len=4, max_len=7, planted_tail=True)
    return generate_synthetic(spec, 3, max_len=8)
