import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bimaug.sim.scenario import Task, generate_demos

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def lift_demos():
    """Three rendered lift-ball demonstrations (60 steps each)."""
    return generate_demos(Task.LIFT_BALL, 3, seed=11)


@pytest.fixture(scope="session")
def lift_demo(lift_demos):
    return lift_demos[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
