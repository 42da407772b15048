import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from triplane_ssc.config import desk_preset
from triplane_ssc.data import desk_recipes, make_scene

settings.register_profile("repo", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_cfg():
    return desk_preset()


@pytest.fixture(scope="session")
def desk_scenes():
    """Two rendered desk scenes shared by the read-only tests."""
    return [make_scene(r) for r in desk_recipes(2, seed=7)]
