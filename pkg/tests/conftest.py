import pytest

from labutils.boundary_util import Box, build_cantor_boundary, build_disk_boundary, build_halfplane_boundary
from labutils.dyadic_util import build_dyadic_tree
from labutils.grid_util import build_grid, identity_coefficients
from labutils.elliptic_util import EllipticProblem
from labutils.whitney_util import RegionBuilder, compute_corkscrews, whitney_decompose

# Coarse on purpose: h >= 1/64 everywhere.
HALFPLANE_BOX = (-1.0, 0.0, 1.0, 2.0)
HALFPLANE_H = 1.0 / 32
HALFPLANE_DEPTH = 4


@pytest.fixture(scope="module")
def halfplane():
    return build_halfplane_boundary(Box(*HALFPLANE_BOX))


@pytest.fixture(scope="module")
def halfplane_tree(halfplane):
    return build_dyadic_tree(halfplane, HALFPLANE_DEPTH)


@pytest.fixture(scope="module")
def halfplane_grid(halfplane):
    return build_grid(halfplane, HALFPLANE_H)


@pytest.fixture(scope="module")
def halfplane_complex(halfplane_grid):
    return whitney_decompose(halfplane_grid)


@pytest.fixture(scope="module")
def halfplane_builder(halfplane_tree, halfplane_complex):
    return RegionBuilder(halfplane_tree, halfplane_complex, k0=4.0)


@pytest.fixture(scope="module")
def halfplane_identity(halfplane_grid):
    return identity_coefficients(halfplane_grid)


@pytest.fixture(scope="module")
def cantor2():
    return build_cantor_boundary(2)


@pytest.fixture(scope="module")
def cantor2_tree(cantor2):
    return build_dyadic_tree(cantor2, 4)


@pytest.fixture(scope="module")
def disk():
    return build_disk_boundary(1.0, 256, box=Box(-1.25, -1.25, 1.25, 1.25))


@pytest.fixture(scope="module")
def disk_grid(disk):
    return build_grid(disk, 1.0 / 32)


@pytest.fixture(scope="module")
def halfplane_wide_builder(halfplane_tree, halfplane_grid, halfplane_complex):
    """Corkscrew balls of radius ℓ(Q), so the coarse cubes resolve on the test grid."""
    corkscrews = compute_corkscrews(halfplane_tree, halfplane_grid, c_cs=1.0)
    return RegionBuilder(halfplane_tree, halfplane_complex, k0=4.0, corkscrews=corkscrews)


@pytest.fixture(scope="module")
def halfplane_problem(halfplane_grid, halfplane_identity):
    return EllipticProblem(halfplane_grid, halfplane_identity)


@pytest.fixture(scope="module")
def disk_problem(disk_grid):
    return EllipticProblem(disk_grid, identity_coefficients(disk_grid))
