import numpy as np
import pandas as pd
import pytest

from labutils.approx_util import Approximator
from labutils.error_util import ParameterError
from labutils.varopoulos_util import (
    assemble_and_verify, atom_data, bmo_norm_and_decompose, cube_means, dyadic_bmo_norm, extend_step_part,
    iterate_extension, linearity_check, smoothed_box, subadditivity_check
)


def _identity(top: int):
    def approximate(u) -> Approximator:
        grid = u.grid
        regions = pd.DataFrame({"region": [0], "kind": ["V-red"], "cube": [top], "value": [np.nan], "cells": [grid.n_cells]})
        return Approximator(grid=grid, top=top, eps=0.5, cells=np.arange(grid.n_cells), values=u.values.copy(),
                            region_of=np.zeros(grid.n_cells, dtype=np.int64), regions=regions, gap=0.0)
    return approximate


def _indicator(tree, q: int) -> np.ndarray:
    values = np.zeros(len(tree.atoms))
    values[tree.cubes.at[q, "start"]:tree.cubes.at[q, "stop"]] = 1.0
    return values


def test_bmo_norm_of_simple_functions(halfplane_tree) -> None:
    assert dyadic_bmo_norm(halfplane_tree, np.full(len(halfplane_tree.atoms), 3.0)) == pytest.approx(0.0)
    child = int(halfplane_tree.children(int(halfplane_tree.roots[0]))[0])
    values = _indicator(halfplane_tree, child)
    assert dyadic_bmo_norm(halfplane_tree, values) == pytest.approx(0.5)
    means = cube_means(halfplane_tree, values)
    assert means[child] == pytest.approx(1.0)
    assert means[int(halfplane_tree.roots[0])] == pytest.approx(0.5)


def test_stopping_split_of_a_cube_indicator(halfplane_tree) -> None:
    q = int(halfplane_tree.generation(2)[0])
    bmo = bmo_norm_and_decompose(halfplane_tree, _indicator(halfplane_tree, q), band=0.5)
    assert bmo.norm == pytest.approx(0.5)
    assert bmo.terms["cube"].tolist() == [q]
    assert bmo.terms["alpha"].tolist() == pytest.approx([0.75])
    assert np.allclose(bmo.values, bmo.bounded + bmo.step)
    assert bmo.c_dec == pytest.approx(0.5)
    assert bmo.c_alpha == pytest.approx(1.5)
    assert bmo.packing == pytest.approx(1.0)


def test_bmo_needs_finite_values_per_atom(halfplane_tree) -> None:
    values = np.zeros(len(halfplane_tree.atoms))
    values[0] = np.inf
    with pytest.raises(ParameterError):
        bmo_norm_and_decompose(halfplane_tree, values)
    with pytest.raises(ParameterError):
        bmo_norm_and_decompose(halfplane_tree, np.zeros(3))


def test_atom_data_extends_to_the_outer_box(halfplane_problem, halfplane_tree) -> None:
    values = halfplane_tree.atoms.centers[:, 0] + 2.0
    data = atom_data(halfplane_problem, halfplane_tree, values)
    outer = halfplane_problem.carriers.outer
    assert np.all(data[outer] >= 1.0)
    assert np.all(atom_data(halfplane_problem, halfplane_tree, values, extend_outer=False)[outer] == 0.0)


def test_solutions_are_linear_in_the_data(halfplane_problem) -> None:
    n = len(halfplane_problem.carriers)
    rng = np.random.default_rng(2)
    assert linearity_check(halfplane_problem, rng.normal(size=n), rng.normal(size=n)) < 1e-10


def test_smoothed_box_is_a_soft_indicator(halfplane_builder, halfplane_tree) -> None:
    q = int(halfplane_tree.roots[0])
    psi = smoothed_box(halfplane_builder, q)
    assert psi.min() >= -1e-12 and psi.max() <= 1.0 + 1e-12
    step = extend_step_part(halfplane_builder, pd.DataFrame({"cube": [q], "alpha": [2.0]}))
    assert np.allclose(step.values, 2.0 * psi)
    assert np.isnan(step.carleson)


def test_halving_loop_on_constant_data(halfplane_problem, halfplane_wide_builder, halfplane_tree) -> None:
    top = int(halfplane_tree.roots[0])
    f0 = np.ones(len(halfplane_tree.atoms))
    centers = [[-0.5, 0.0]]
    radii = [0.5]
    series = iterate_extension(halfplane_problem, halfplane_wide_builder, f0, top, _identity(top), iterations=3,
                               centers=centers, radii=radii)
    assert not series.aborted
    assert 1 <= len(series.steps) <= 3
    row = series.table.iloc[0]
    assert row["f_sup"] == pytest.approx(1.0)
    assert row["f_next_sup"] == pytest.approx(0.0, abs=1e-8)
    assert series.slack == pytest.approx(0.0, abs=1e-8)
    assert series.tail == pytest.approx(0.5 ** len(series.steps))

    bmo = bmo_norm_and_decompose(halfplane_tree, f0)
    step = extend_step_part(halfplane_wide_builder, bmo.terms)
    report = assemble_and_verify(halfplane_wide_builder, series, step, bmo, [[-0.5, 0.0], [-0.25, 0.0]], centers, radii)
    assert report.bmo_norm < 1e-12
    assert report.trace_error < 1e-8
    assert report.gradient_bound < 1e-8
    whole, parts = subadditivity_check(series, halfplane_problem.grid, centers, radii)
    assert whole <= parts + 1e-12


def test_iteration_count_is_capped(halfplane_problem, halfplane_wide_builder, halfplane_tree) -> None:
    top = int(halfplane_tree.roots[0])
    with pytest.raises(ParameterError):
        iterate_extension(halfplane_problem, halfplane_wide_builder, np.ones(len(halfplane_tree.atoms)), top,
                          _identity(top), iterations=11)
