import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from hbarlab.phasespace import (GaussianMixture, GaussianPotential, GridSpec,
                                ZeroPotential, default_bank)


@pytest.fixture(scope="session")
def phi():
    return GaussianPotential(amplitude=1.0, sigma=1.0, d=1)


@pytest.fixture(scope="session")
def phi0():
    return ZeroPotential(d=1)


@pytest.fixture(scope="session")
def gstd():
    return GaussianMixture.standard(1)


@pytest.fixture(scope="session")
def bank():
    return default_bank(1)


@pytest.fixture(scope="session")
def spec256():
    return GridSpec(-10.0, 10.0, -8.0, 8.0, 256, 256)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
