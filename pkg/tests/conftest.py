import numpy as np
import pytest
from hypothesis import settings

from esoarm.arm_dynamics import ArmParams

settings.register_profile("esoarm", deadline=None, max_examples=50)
settings.load_profile("esoarm")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def arm():
    return ArmParams()


@pytest.fixture
def loaded_arm():
    return ArmParams(payload_mass=1.5, torque_map_B=(24.0, 36.0, 11.0))


def random_q(rng, n=None):
    shape = (3,) if n is None else (n, 3)
    return rng.uniform(-np.pi, np.pi, size=shape)


def random_dq(rng, n=None, scale=2.0):
    shape = (3,) if n is None else (n, 3)
    return rng.uniform(-scale, scale, size=shape)
