import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(20260819)


def random_policies(rng, n_levels=4, n_actions=5, concentration=0.6):
    """Dirichlet rows: generic, strictly positive, distinct policies."""
    return rng.dirichlet(np.full(n_actions, concentration), size=n_levels)
