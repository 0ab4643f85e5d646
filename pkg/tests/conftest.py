import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mwqsim.netmodel import Topology

# compiled kernels make the first example slow; deadlines would be noise
settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def single_link():
    return Topology.from_pairs(2, [(1, 2)])


@pytest.fixture
def two_to_one():
    """Two links into one receiver."""
    return Topology.from_pairs(3, [(1, 3), (2, 3)])


def amp(g):
    """Real channel coefficient with gain ``g``."""
    return np.sqrt(np.atleast_1d(np.asarray(g, dtype=float))).astype(complex)
