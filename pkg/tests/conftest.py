import numpy as np
import pytest

from glapmdp import core


@pytest.fixture
def small_tabular():
    """4-state, 2-action, 3-step tabular embedding with full-support kernel."""
    return core.make_random_tabular_mdp(4, 2, 3, seed=11, initial_state=np.full(4, 0.25))


@pytest.fixture
def small_lowrank():
    """4-state, 2-action, 3-step rank-4 instance with uniform start."""
    return core.make_random_mdp(4, 2, 3, 4, seed=0, initial_state=np.full(4, 0.25))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
