import numpy as np
import pytest

from pcsmooth.dynsys import SystemParams


@pytest.fixture
def atmos_params():
    """Reference parameter set for the three-component circulation model."""
    return SystemParams(a=0.25, b=4.0, f1=8.0, f2=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_spd(dim, rng, scale=1.0):
    """A well-conditioned random SPD matrix."""
    a = rng.standard_normal((dim, dim))
    return scale * (a @ a.T + dim * np.eye(dim))
