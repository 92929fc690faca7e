import numpy as np
import pytest

from labutils.boundary_util import Box, build_cantor_boundary, build_halfplane_boundary
from labutils.dyadic_util import build_dyadic_tree
from labutils.elliptic_util import MeasureCache, sigma_measure
from labutils.error_util import ParameterError
from labutils.grid_util import build_grid, diagonal_radial_coefficients, diagonal_coefficients, identity_coefficients
from labutils.oracle_util import (
    angular_masses, compare_to_reference, comparison_test_eq1, corkscrew_density_bound, disk_green,
    halfplane_cube_masses, halfplane_poisson_density, halfplane_poisson_mass, line_cubes, wos_exit_distribution
)


@pytest.fixture(scope="module")
def disk_tree(disk):
    return build_dyadic_tree(disk, 3)


@pytest.fixture(scope="module")
def eq1_setup():
    boundary = build_cantor_boundary(1, include_line=True, line_offset=-2.0)
    grid = build_grid(boundary, 1.0 / 8)
    return grid, build_dyadic_tree(boundary, 2)


def test_poisson_kernel_closed_forms() -> None:
    assert halfplane_poisson_density([0.0, 1.0], np.array([0.0]))[0] == pytest.approx(1.0 / np.pi)
    assert halfplane_poisson_mass(np.array([0.0, 1.0]), -1.0, 1.0)[0] == pytest.approx(0.5)
    assert halfplane_poisson_mass(np.array([0.3, 0.2]), -1e9, 1e9)[0] == pytest.approx(1.0)
    with pytest.raises(ParameterError):
        halfplane_poisson_density([0.0, -1.0], np.array([0.0]))
    with pytest.raises(ParameterError):
        halfplane_poisson_mass(np.array([0.0, 0.0]), -1.0, 1.0)


def test_halfplane_cube_masses_add_up(halfplane_tree) -> None:
    masses = halfplane_cube_masses(halfplane_tree, [0.0, 1.0])
    assert masses[halfplane_tree.roots].sum() == pytest.approx(0.5)
    for g in range(halfplane_tree.max_depth + 1):
        assert masses[halfplane_tree.generation(g)].sum() == pytest.approx(0.5)


def test_disk_green_vanishes_on_the_circle_and_is_symmetric() -> None:
    angles = np.linspace(0, 2 * np.pi, 9)
    circle = np.column_stack([np.cos(angles), np.sin(angles)])
    assert np.allclose(disk_green(circle, [0.3, -0.2]), 0.0, atol=1e-12)
    a, b = np.array([0.1, 0.4]), np.array([-0.5, 0.2])
    assert disk_green(a, b)[0] == pytest.approx(disk_green(b, a)[0])
    assert disk_green(np.array([0.5, 0.0]), [0.0, 0.0])[0] == pytest.approx(-np.log(0.5) / (2 * np.pi))


def test_angular_masses_of_the_arc_length(disk_tree) -> None:
    arcs = angular_masses(disk_tree, sigma_measure(disk_tree).atom_mass, 4)
    assert arcs.sum() == pytest.approx(disk_tree.atoms.mass.sum())
    assert np.allclose(arcs, np.pi / 2, atol=0.15)


def test_walk_on_spheres_from_the_disk_center(disk_tree) -> None:
    estimate = wos_exit_distribution(disk_tree, [0.0, 0.0], walkers=4000, seed=1, batch_size=1000)
    assert estimate.absorbed + estimate.leaked + estimate.discarded == 4000
    assert estimate.leaked == 0
    assert estimate.discarded_fraction < 1e-3
    arcs = angular_masses(disk_tree, estimate.measure.atom_mass, 4)
    assert np.allclose(arcs, 0.25, atol=0.03)
    frame = estimate.to_frame()
    assert list(frame.columns) == ["cube", "generation", "mass", "stderr"]


def test_walk_on_spheres_is_reproducible(disk_tree) -> None:
    a = wos_exit_distribution(disk_tree, [0.2, 0.1], walkers=500, seed=9, batch_size=200, workers=2)
    b = wos_exit_distribution(disk_tree, [0.2, 0.1], walkers=500, seed=9, batch_size=200)
    assert np.array_equal(a.measure.atom_mass, b.measure.atom_mass)


def test_walk_on_spheres_rejects_bad_poles(disk_tree) -> None:
    with pytest.raises(ParameterError):
        wos_exit_distribution(disk_tree, [2.0, 0.0], walkers=10)
    with pytest.raises(ParameterError):
        wos_exit_distribution(disk_tree, [0.0, 0.0], walkers=0)


def test_walk_on_spheres_matches_the_poisson_kernel() -> None:
    boundary = build_halfplane_boundary(Box(-16.0, 0.0, 16.0, 32.0))
    tree = build_dyadic_tree(boundary, 2)
    estimate = wos_exit_distribution(tree, [0.0, 1.0], walkers=4000, seed=3)
    reference = halfplane_cube_masses(tree, [0.0, 1.0])
    near = tree.generation(2)
    near = near[np.abs(tree.centers()[near, 0]) < 4]
    report = compare_to_reference(estimate, reference, near, z=4.0)
    assert report.fraction >= 0.9
    assert 0 < estimate.measure.leakage < 0.1
    with pytest.raises(ParameterError):
        compare_to_reference(estimate, reference[:3])


def test_line_cubes_skip_the_squares(eq1_setup) -> None:
    _, tree = eq1_setup
    cubes = line_cubes(tree, 1)
    assert len(cubes) > 0
    assert not np.any(tree.atoms.is_box[np.concatenate([
        np.arange(tree.cubes.at[q, "start"], tree.cubes.at[q, "stop"]) for q in cubes
    ])])


def test_comparison_with_identity_coefficients_is_exact(eq1_setup) -> None:
    grid, tree = eq1_setup
    report = comparison_test_eq1(grid, tree, identity_coefficients(grid), [[0.0, 1.5]], generation=1)
    assert report.sup_ratio == pytest.approx(1.0, rel=1e-10)
    assert report.inf_ratio == pytest.approx(1.0, rel=1e-10)


def test_comparison_with_a_radial_field(eq1_setup) -> None:
    grid, tree = eq1_setup
    report = comparison_test_eq1(grid, tree, diagonal_radial_coefficients(grid, 0.5, 1.0), [[0.0, 1.5], [1.5, 0.5]], 1)
    assert 0 < report.inf_ratio <= report.sup_ratio < np.inf
    assert set(report.table["pole_x"]) == {0.0, 1.5}
    with pytest.raises(ParameterError):
        comparison_test_eq1(grid, tree, diagonal_coefficients(grid, 1.0, 2.0), [[0.0, 1.5]], 1)
    with pytest.raises(ParameterError):
        comparison_test_eq1(grid, tree, identity_coefficients(grid), [], 1)


def test_corkscrew_density_bound_is_positive(halfplane_problem, halfplane_wide_builder, halfplane_tree) -> None:
    cache = MeasureCache(halfplane_problem, halfplane_tree)
    table = corkscrew_density_bound(halfplane_wide_builder, cache, halfplane_tree.generation(1))
    assert len(table) == len(halfplane_tree.generation(1))
    assert np.all(table["bound"] > 0)
    assert np.all(table["omega"] > 0)
