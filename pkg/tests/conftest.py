import numpy as np
import pytest

from fembem.mesh import make_initial_mesh


@pytest.fixture()
def lshape():
    return make_initial_mesh("lshape")


@pytest.fixture()
def zshape():
    return make_initial_mesh("zshape")


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
