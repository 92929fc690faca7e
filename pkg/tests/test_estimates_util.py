import numpy as np
import pytest

from labutils.elliptic_util import solve_dirichlet
from labutils.error_util import ParameterError
from labutils.estimates_util import (
    boundary_harnack_check, cme_constant, extend_data, green_energy_identity, green_monotonicity, green_sigma_delta_check,
    nontangential_limit_check, nontangential_maximal, refinement_check, resolved_cubes, riesz_formula_check,
    verify_local_estimates, verify_measure_estimates
)
from labutils.grid_util import identity_coefficients


def _bump(center, radius):
    center = np.asarray(center, dtype=float)

    def value(p):
        s = np.sum((p - center) ** 2, axis=1) / radius ** 2
        return np.where(s < 1, (1 - s) ** 2, 0.0)

    def gradient(p):
        d = p - center
        s = np.sum(d ** 2, axis=1) / radius ** 2
        factor = np.where(s < 1, -4 * (1 - s) / radius ** 2, 0.0)
        return factor[:, None] * d

    return value, gradient


def test_local_estimates_on_an_affine_solution(disk_problem) -> None:
    u = solve_dirichlet(disk_problem, lambda p: 2.0 + p[:, 0])
    report = verify_local_estimates(u, [(0.0, 0.0, 0.2), (0.9, 0.0, 0.1)])
    assert len(report.table) == 1
    assert len(report.skipped) == 1
    row = report.table.iloc[0]
    assert 0 < row["caccioppoli"] < 1
    assert row["harnack"] == pytest.approx(2.2 / 1.8, rel=0.05)
    assert 0.8 <= row["alpha"] <= 1.0


def test_resolved_cubes_are_a_subset(halfplane_builder, halfplane_wide_builder, halfplane_tree) -> None:
    # default corkscrews are too shallow for h = 1/32
    assert len(resolved_cubes(halfplane_builder)) == 0
    resolved = resolved_cubes(halfplane_wide_builder)
    gens = halfplane_tree.cubes.loc[resolved, "generation"]
    assert set(gens) == {0, 1, 2}
    subset = resolved_cubes(halfplane_wide_builder, halfplane_tree.generation(1))
    assert np.all(np.isin(subset, halfplane_tree.generation(1)))


def test_measure_estimates_on_the_halfplane(halfplane_problem, halfplane_wide_builder) -> None:
    report = verify_measure_estimates(halfplane_problem, halfplane_wide_builder, [[0.0, 1.5]])
    assert report.bourgain >= 0.1
    lo, hi = report.cfms_range
    assert 0 < lo <= hi
    kinds = set(report.table["kind"])
    assert {"bourgain", "cfms"} <= kinds


def test_green_energy_identity_on_a_rectangle(halfplane_problem, halfplane_grid) -> None:
    data = lambda p: np.sin(3 * p[:, 0])
    u = solve_dirichlet(halfplane_problem, data)
    centers = halfplane_grid.centers
    cells = np.flatnonzero((np.abs(centers[:, 0]) < 0.75) & (centers[:, 1] < 1.0))
    identity = green_energy_identity(halfplane_problem, u, data, cells, [0.0, 0.5])
    assert identity.rhs > 0
    assert 0.5 <= identity.ratio <= 2.0
    with pytest.raises(ParameterError):
        green_energy_identity(halfplane_problem, u, data, cells, [0.0, 1.5])


def test_green_grows_with_the_domain(halfplane_problem, halfplane_grid) -> None:
    centers = halfplane_grid.centers
    outer = np.flatnonzero(centers[:, 1] < 1.5)
    inner = np.flatnonzero((np.abs(centers[:, 0]) < 0.5) & (centers[:, 1] < 1.0))
    x = halfplane_grid.nearest_cell([0.0, 0.5])
    pairs = [(x, int(y)) for y in inner[::37]]
    report = green_monotonicity(halfplane_problem, inner, outer, pairs)
    assert report.passed
    assert report.pairs == len(pairs)
    with pytest.raises(ParameterError):
        green_monotonicity(halfplane_problem, outer, inner, pairs)


def test_extend_data_can_skip_the_outer_box(halfplane_problem) -> None:
    values = extend_data(halfplane_problem, lambda p: 1.0 + p[:, 0], extend_outer=False)
    outer = halfplane_problem.carriers.outer
    assert np.all(values[outer] == 0.0)
    full = extend_data(halfplane_problem, lambda p: 1.0 + p[:, 0])
    assert np.allclose(full[~outer], values[~outer])


def test_nontangential_limits_of_affine_data(halfplane_problem, halfplane_wide_builder) -> None:
    f = lambda p: 1.0 + 0.5 * p[:, 0]
    report = nontangential_limit_check(halfplane_problem, halfplane_wide_builder, f, [[-0.3, 0.0], [0.4, 0.0]])
    assert report.converged.all()
    assert np.all(report.table["generation"] == 2)
    assert np.all(report.table["nt_max"] > 0)
    u = solve_dirichlet(halfplane_problem, extend_data(halfplane_problem, f))
    top = int(halfplane_wide_builder.tree.roots[1])
    assert nontangential_maximal(halfplane_wide_builder, u.values, [0.4, 0.0], top) >= 1.0
    assert cme_constant(halfplane_wide_builder, u) > 0


def test_boundary_harnack_spread_is_finite(halfplane_problem, halfplane_wide_builder) -> None:
    spread = boundary_harnack_check(halfplane_problem, halfplane_wide_builder, ([-0.5, 1.5], [0.5, 1.5]))
    assert 1.0 <= spread < np.inf


def test_green_over_distance_tracks_the_measure_density(halfplane_problem, halfplane_wide_builder, halfplane_tree) -> None:
    lo, hi = green_sigma_delta_check(halfplane_problem, halfplane_wide_builder, [0.0, 1.5], halfplane_tree.generation(1))
    assert 0 < lo <= hi < np.inf


def test_riesz_formula_for_a_bump(halfplane_problem) -> None:
    value, gradient = _bump([0.0, 0.75], 0.3)
    expected, integral = riesz_formula_check(halfplane_problem, value, gradient, [0.0, 0.75])
    assert expected == pytest.approx(1.0, abs=1e-3)
    assert integral == pytest.approx(expected, abs=0.15)


def test_refinement_changes_shrink(halfplane) -> None:
    points = np.array([[0.0, 0.5], [0.5, 1.0]])
    report = refinement_check(halfplane, identity_coefficients, lambda p: np.sin(3 * p[:, 0]), points, 1.0 / 8, levels=3)
    assert report.steps == [1.0 / 8, 1.0 / 16, 1.0 / 32]
    assert len(report.changes) == 2
    assert report.passed
