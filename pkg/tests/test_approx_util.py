import numpy as np
import pandas as pd
import pytest

from labutils.approx_util import (
    Approximator, approximate, approximator_summary, carleson_l1_norm, corkscrew_values, global_approximator,
    holder_xi, mollify, nontangential_trace, regularized_distance, total_variation_oracle, trace_on_atoms,
    variation_density
)
from labutils.elliptic_util import MeasureCache, solve_dirichlet
from labutils.error_util import ParameterError
from labutils.estimates_util import extend_data
from labutils.whitney_util import carleson_box


def _constant_approximator(grid, value: float, eps: float = 2.0) -> Approximator:
    cells = np.arange(grid.n_cells)
    regions = pd.DataFrame({"region": [0], "kind": ["A"], "cube": [0], "value": [value], "cells": [grid.n_cells]})
    return Approximator(grid=grid, top=0, eps=eps, cells=cells, values=np.full(grid.n_cells, value),
                        region_of=np.zeros(grid.n_cells, dtype=np.int64), regions=regions, gap=0.0)


@pytest.fixture(scope="module")
def lacunary_solution(halfplane_problem):
    return solve_dirichlet(halfplane_problem, lambda p: np.sign(np.sin(2 * np.pi * p[:, 0]) + np.sin(4 * np.pi * p[:, 0])))


def test_approximator_covers_the_carleson_box(halfplane_builder, halfplane_problem, halfplane_tree, lacunary_solution) -> None:
    cache = MeasureCache(halfplane_problem, halfplane_tree)
    top = int(halfplane_tree.roots[1])
    run = approximate(halfplane_builder, cache, lacunary_solution, top, eps=0.5)
    phi = run.approximator
    assert np.array_equal(phi.cells, carleson_box(halfplane_builder, top))
    assert np.all(phi.region_of[phi.cells] >= 0)
    assert set(phi.regions["kind"]) <= {"A", "V-blue", "V-red"}
    red = phi.pointwise
    assert np.allclose(phi.values[red], lacunary_solution.values[red])
    assert np.isfinite(phi.gap)
    summary = approximator_summary(phi)
    assert summary["regions"] == phi.n_regions
    assert len(run.decomposition.regimes) >= 1


@pytest.fixture(scope="module")
def bump_solution(halfplane_problem):
    data = extend_data(halfplane_problem, lambda p: 0.5 + 0.1 * (np.abs(p[:, 0] - 0.3) < 0.05))
    return solve_dirichlet(halfplane_problem, data)


@pytest.mark.parametrize("eps", [0.5, 0.25, 0.125])
def test_approximator_gap_on_nearly_constant_data(halfplane_builder, halfplane_problem, halfplane_tree, bump_solution,
                                                  eps) -> None:
    cache = MeasureCache(halfplane_problem, halfplane_tree)
    top = int(halfplane_tree.roots[1])
    phi = approximate(halfplane_builder, cache, bump_solution, top, eps=eps).approximator
    assert "A" in set(phi.regions["kind"])
    assert phi.gap <= eps
    inside = phi.cells[phi.region_of[phi.cells] >= 0]
    assert np.all(np.abs(phi.values[inside] - bump_solution.values[inside]) <= eps * bump_solution.sup() + 1e-12)


def test_corkscrew_values_mark_unresolved_cubes(halfplane_builder, halfplane_grid) -> None:
    values = corkscrew_values(halfplane_builder, np.ones(halfplane_grid.n_cells))
    cells = halfplane_builder.corkscrews["cell"].to_numpy()
    assert np.all(values[cells >= 0] == 1.0)
    assert np.all(np.isnan(values[cells < 0]))


def test_variation_of_the_whole_grid_matches_the_oracle(halfplane_grid) -> None:
    values = np.where(halfplane_grid.centers[:, 0] > 0.1, 1.0, 0.0) + halfplane_grid.centers[:, 1]
    oracle = total_variation_oracle(halfplane_grid, values)
    report = carleson_l1_norm(halfplane_grid, values, [[0.0, 0.0]], [10.0])
    assert report.norm * 10.0 == pytest.approx(oracle, rel=1e-10)
    assert variation_density(halfplane_grid, values).sum() == pytest.approx(oracle, rel=1e-10)
    # one unit jump along a vertical line of height 2, plus the y increments
    assert oracle == pytest.approx(2.0 + 4.0 * (1 - halfplane_grid.h), rel=1e-10)


def test_carleson_norm_of_a_constant_is_zero(halfplane_grid) -> None:
    values = np.full(halfplane_grid.n_cells, 3.0)
    report = carleson_l1_norm(halfplane_grid, values, [[0.0, 0.0], [0.5, 0.0]], [0.25, 0.5])
    assert report.norm == 0.0
    assert len(report.table) == 4
    gradient = carleson_l1_norm(halfplane_grid, values, [[0.0, 0.0]], [0.5], mode="gradient")
    assert gradient.norm == pytest.approx(0.0)
    with pytest.raises(ParameterError):
        carleson_l1_norm(halfplane_grid, values, [[0.0, 0.0]], [0.5], mode="sup")


def test_regularized_distance_is_comparable_to_delta(halfplane_grid) -> None:
    beta = regularized_distance(halfplane_grid)
    assert 0.5 <= beta.c1 <= beta.c2 <= 2.0
    assert beta.beta.shape == halfplane_grid.delta.shape


def test_holder_xi() -> None:
    assert holder_xi(0.5, 1.0, 1.0) == pytest.approx(0.25)
    assert holder_xi(0.5, 2.0, 0.5) == pytest.approx(0.5 * 0.25 ** 2)
    with pytest.raises(ParameterError):
        holder_xi(0.5, 0.0, 1.0)
    with pytest.raises(ParameterError):
        holder_xi(0.5, 1.0, 1.5)


def test_mollifying_a_constant_keeps_it(halfplane_grid) -> None:
    phi = _constant_approximator(halfplane_grid, 0.75)
    smooth = mollify(phi, np.full(halfplane_grid.n_cells, 0.75), xi=1.0)
    assert smooth.xi == pytest.approx(1.0)
    assert np.allclose(smooth.values, 0.75)
    assert smooth.gap == pytest.approx(0.0, abs=1e-12)
    assert smooth.gradient_bound == pytest.approx(0.0, abs=1e-10)
    assert len(smooth.under_resolved) > 0


def test_trace_of_a_constant_field(halfplane_wide_builder, halfplane_grid, halfplane_tree) -> None:
    top = int(halfplane_tree.roots[0])
    values = np.full(halfplane_grid.n_cells, 3.0)
    trace = trace_on_atoms(halfplane_wide_builder, values, top)
    assert not trace.excluded.any()
    assert np.allclose(trace.phi, 3.0)
    assert np.all(trace.levels == 3)
    report = nontangential_trace(halfplane_wide_builder, values, [[-0.5, 0.0], [-0.2, 0.0]], top)
    assert np.allclose(report.phi, 3.0)
    assert report.cauchy.all()
    assert np.all(report.table["levels"] == 3)


def test_global_approximator_walks_the_chain(halfplane_builder, halfplane_grid) -> None:
    u = halfplane_grid.centers[:, 0].copy()

    def local(q: int) -> Approximator:
        phi = _constant_approximator(halfplane_grid, 0.0)
        box = carleson_box(halfplane_builder, q)
        phi.values[:] = np.nan
        phi.values[box] = u[box]
        return phi

    result = global_approximator(halfplane_builder, u, local, [0.3, 0.0], start_generation=2)
    assert len(result.chain) == 3
    assert result.gap == pytest.approx(0.0)
    with pytest.raises(ParameterError):
        global_approximator(halfplane_builder, u, local, [0.3, 0.0], start_generation=-1)
