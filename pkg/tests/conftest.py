import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mopelab.config import RunConfig

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg() -> RunConfig:
    """Small dims, no backbone pretraining: fast enough for unit tests."""
    return RunConfig().replace(
        encoder={"d_model": 8, "num_heads": 2, "d_ff": 16, "pretrain_steps": 0},
        complementary={"d_model": 8, "num_heads": 2, "d_ff": 16},
        mope={"experts": 4, "prompt_len": 2},
        data={"train_size": 32, "val_size": 16, "test_size": 16},
        train={"epochs": 2, "batch_size": 8},
    )
