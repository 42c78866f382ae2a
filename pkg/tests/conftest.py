import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from unislp.backbone import ModelConfig, UnifiedModel
from unislp.gradcheck import TINY

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return TINY


@pytest.fixture
def tiny_model(tiny_cfg) -> UnifiedModel:
    return UnifiedModel(tiny_cfg)


@pytest.fixture
def small_cfg() -> ModelConfig:
    # big enough to carry the 42-token vocabulary, small enough for quick training runs
    return ModelConfig(d_model=32, n_heads=2, d_ff=64, encoder_layers=2, decoder_layers=1, adapter_dim=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
