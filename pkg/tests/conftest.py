import numpy as np
import pytest

from emscat.geometry import make_sphere_surface
from emscat.operators import MaterialPair, build_muller_operator


@pytest.fixture(scope="session")
def sphere_small():
    """N=600 sphere (coarse, fast)."""
    return make_sphere_surface(1, 10)


@pytest.fixture(scope="session")
def sphere_medium():
    """N=1536 sphere."""
    return make_sphere_surface(2, 8)


@pytest.fixture(scope="session")
def sphere_nc12():
    """N=3456 sphere, the finest mesh used by the regular suite."""
    return make_sphere_surface(2, 12)


@pytest.fixture(scope="session")
def materials_contrast():
    """eps_i = 2.25 glass-like sphere at kappa_e = 2*pi."""
    return MaterialPair(1.0, 1.0, 2.25, 1.0, 2 * np.pi)


@pytest.fixture(scope="session")
def operator_medium(sphere_medium, materials_contrast):
    """Accelerated operator on the N=1536 sphere."""
    return build_muller_operator(sphere_medium, materials_contrast,
                                 accelerated=True)
