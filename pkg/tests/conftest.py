import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stgcl.data import synth_generate
from stgcl.graph import build_adjacency

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_data():
    """A compact synthetic dataset: 6 nodes, 4 days of 48 steps."""
    ds = synth_generate(num_nodes=6, days=4, steps_per_day=48, seed=3)
    return ds, build_adjacency(ds.distances)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

