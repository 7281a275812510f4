import numpy as np
import pytest

from fosls_seaice.mesh import build_structured


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mesh4():
    return build_structured(4)
