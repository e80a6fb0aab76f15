import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """20 trajectories of 100 slots in the default room (4 held out)."""
    from chartjepa.channelsim import default_environment, simulate

    return simulate(default_environment(), n_trajectories=20, steps=100, seed=3)


@pytest.fixture(scope="session")
def small_features(small_dataset):
    from chartjepa.features import preprocess_batch

    return preprocess_batch(small_dataset.h)
