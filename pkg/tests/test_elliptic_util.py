import numpy as np
import pytest

from labutils.elliptic_util import (
    EllipticProblem, MeasureCache, adjoint_green_values, elliptic_measure_row, green_function, maximum_principle_gap,
    pole_cell, sigma_measure, solve_dirichlet
)
from labutils.error_util import ParameterError


def test_constant_data_gives_a_constant_solution(disk_problem) -> None:
    u = solve_dirichlet(disk_problem, 1.0)
    assert np.allclose(u.values, 1.0, atol=1e-8)


def test_linear_data_is_reproduced_away_from_the_circle(disk_problem) -> None:
    u = solve_dirichlet(disk_problem, lambda p: p[:, 0])
    grid = disk_problem.grid
    deep = grid.delta >= 0.25
    assert np.max(np.abs(u.values[deep] - grid.centers[deep, 0])) < 0.03
    assert maximum_principle_gap(disk_problem, u, lambda p: p[:, 0]) <= 1e-8


def test_poisson_problem_on_the_disk(disk_problem) -> None:
    rhs = np.ones(disk_problem.grid.n_cells)
    u = solve_dirichlet(disk_problem, 0.0, rhs=rhs)
    center = u.at(np.array([[0.0, 0.0]]))[0]
    assert center == pytest.approx(0.25, rel=0.05)


def test_matrix_rows_balance_the_carriers(halfplane_problem) -> None:
    ones = np.ones(halfplane_problem.grid.n_cells)
    carriers = halfplane_problem.carrier_matrix @ np.ones(len(halfplane_problem.carriers))
    assert np.allclose(halfplane_problem.matrix @ ones, carriers)


def test_green_function_is_symmetric_and_positive(halfplane_problem) -> None:
    grid = halfplane_problem.grid
    a = grid.nearest_cell([-0.3, 0.5])
    b = grid.nearest_cell([0.4, 1.1])
    columns = halfplane_problem.solve_columns(halfplane_problem.unit_source([a, b]))
    assert columns[b, 0] == pytest.approx(columns[a, 1], rel=1e-8)
    assert np.all(columns >= -1e-12)
    green = green_function(halfplane_problem, [0.0, 1.0])
    adjoint = adjoint_green_values(halfplane_problem, [0.0, 1.0])
    assert np.allclose(green.field.values, adjoint, atol=1e-12)
    assert green.field.values[green.pole_cell] == green.field.values.max()


def test_disk_measure_is_a_probability(disk_problem, disk) -> None:
    from labutils.dyadic_util import build_dyadic_tree

    tree = build_dyadic_tree(disk, 3)
    row = elliptic_measure_row(disk_problem, tree, [0.0, 0.0])
    assert row.leakage == 0.0
    assert row.total == pytest.approx(1.0, abs=1e-8)
    assert row.additivity_error() < 1e-12
    assert row.kind == "omega"


def test_halfplane_measure_and_leakage_add_up(halfplane_problem, halfplane_tree) -> None:
    row = elliptic_measure_row(halfplane_problem, halfplane_tree, [0.0, 1.0])
    assert 0.0 < row.leakage < 1.0
    assert row.total + row.leakage == pytest.approx(1.0, abs=1e-8)
    assert np.all(row.atom_mass >= -1e-12)
    # the atoms under the pole carry more than the ones at the corners
    centers = halfplane_tree.atoms.centers
    assert row.atom_mass[np.argmin(np.abs(centers[:, 0]))] > row.atom_mass[np.argmax(np.abs(centers[:, 0]))]


def test_sigma_measure_matches_the_cubes(halfplane_tree) -> None:
    sigma = sigma_measure(halfplane_tree)
    assert sigma.total == pytest.approx(2.0)
    assert sigma.ball([0.0, 0.0], 0.25) == pytest.approx(0.5)
    assert sigma.additivity_error() < 1e-12


def test_measure_cache_reuses_rows(halfplane_problem, halfplane_tree) -> None:
    cache = MeasureCache(halfplane_problem, halfplane_tree)
    first = cache.row([0.0, 1.0])
    second = cache.row([0.0, 1.0])
    assert first is second
    assert len(cache) == 1


def test_bad_inputs_raise(halfplane_problem, halfplane_grid, halfplane_identity) -> None:
    with pytest.raises(ParameterError):
        green_function(halfplane_problem, [0.0, -0.5])
    with pytest.raises(ParameterError):
        EllipticProblem(halfplane_grid, halfplane_identity, method="foo")
    with pytest.raises(ParameterError):
        halfplane_problem.carrier_values(np.zeros(3))


def test_outer_carriers_take_zero(halfplane_problem) -> None:
    values = halfplane_problem.carrier_values(2.0)
    outer = halfplane_problem.carriers.outer
    assert np.all(values[outer] == 0.0)
    assert np.all(values[~outer] == 2.0)


def test_iterative_solver_agrees_with_the_direct_one(disk_grid, disk_problem) -> None:
    from labutils.grid_util import identity_coefficients

    iterative = EllipticProblem(disk_grid, identity_coefficients(disk_grid), method="cg")
    data = lambda p: p[:, 0] * p[:, 1]
    direct = solve_dirichlet(disk_problem, data)
    approx = solve_dirichlet(iterative, data)
    assert np.allclose(direct.values, approx.values, atol=1e-6)


def test_subdomain_measure_sums_to_one(halfplane_problem, halfplane_grid) -> None:
    centers = halfplane_grid.centers
    cells = np.flatnonzero((np.abs(centers[:, 0]) < 0.5) & (centers[:, 1] < 0.75))
    sub = halfplane_problem.restrict(cells)
    pole = halfplane_grid.nearest_cell([0.0, 0.3])
    neighbor_mass, carrier_mass, w = sub.measure(pole)
    assert neighbor_mass.sum() + carrier_mass.sum() == pytest.approx(1.0, abs=1e-8)
    assert np.all(w >= -1e-12)
    with pytest.raises(ParameterError):
        sub.green(halfplane_grid.nearest_cell([0.9, 1.5]))


def test_pole_cell_holds_the_pole(halfplane_problem) -> None:
    grid = halfplane_problem.grid
    cell = pole_cell(halfplane_problem, [0.3, 0.5])
    assert np.all(np.abs(grid.centers[cell] - [0.3, 0.5]) <= grid.h / 2 + 1e-12)
    with pytest.raises(ParameterError):
        pole_cell(halfplane_problem, [0.3, -0.5])
    with pytest.raises(ParameterError):
        pole_cell(halfplane_problem, [5.0, 0.5])
