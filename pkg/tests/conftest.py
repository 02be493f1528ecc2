import numpy as np
import pytest

from unipert import kernels
from unipert.encoder import EncoderDims, make_ensemble


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # compile the numba kernels once so timed tests see steady-state cost
    kernels.warmup()


@pytest.fixture(scope="session")
def tiny_dims():
    return EncoderDims(height=8, width=8, channels=3, patch=4, dim=6)


@pytest.fixture(scope="session")
def tiny_encoders(tiny_dims):
    return make_ensemble([11, 22], tiny_dims)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
