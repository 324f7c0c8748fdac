import numpy as np
import pytest

from twogrid_afem.assembly import assemble
from twogrid_afem.mesh import CONTACT, DIRICHLET, build_initial, lshape, unit_square


def smooth_f(x, y):
    return np.array([np.sin(3 * x + y), np.cos(x * y)])


def smooth_ud(x, y):
    return np.array([x * y + 1.0, np.exp(x)])


@pytest.fixture(scope="session")
def square2():
    """Unit square as two coarse triangles, Dirichlet bottom, contact elsewhere."""
    return build_initial(unit_square(), 2.0)


@pytest.fixture(scope="session")
def square_mesh():
    return build_initial(unit_square(), 0.3)


@pytest.fixture(scope="session")
def lshape_mesh():
    return build_initial(lshape(), 0.5)


@pytest.fixture(scope="session")
def square_sys(square_mesh):
    return assemble(square_mesh, smooth_f, smooth_ud)


@pytest.fixture(scope="session")
def two_contact_mesh():
    """Two-triangle square whose only contact vertices are the side midpoints (4 pairs)."""
    return build_initial(unit_square((DIRICHLET, CONTACT, DIRICHLET, CONTACT)), 2.0)


@pytest.fixture(scope="session")
def three_contact_mesh():
    """Two-triangle square with contact on the right and top sides (3 vertices, 6 pairs)."""
    return build_initial(unit_square((DIRICHLET, CONTACT, CONTACT, DIRICHLET)), 2.0)
