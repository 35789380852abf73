import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gazeshield.data import SyntheticConfig, generate_synthetic

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_ds():
    return generate_synthetic(SyntheticConfig(records_per_student_per_level=20, seed=7))


@pytest.fixture(scope="session")
def default_ds():
    return generate_synthetic(SyntheticConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
