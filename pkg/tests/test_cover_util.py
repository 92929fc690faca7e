import math

import numpy as np
import pandas as pd
import pytest

from labutils.approx_util import Approximator
from labutils.cover_util import (
    atom_mask, build_test_set, converse_experiment, descendant_at, good_eps_cover, indicator_solution, tilde_cube
)
from labutils.elliptic_util import MeasureCache, sigma_measure
from labutils.error_util import ParameterError


def _deep_cube(tree) -> int:
    root = int(tree.roots[0])
    return int(tree.descendants(root)[-1])


def test_good_cover_of_one_deep_cube(halfplane_tree) -> None:
    root = int(halfplane_tree.roots[0])
    target = _deep_cube(halfplane_tree)
    cover = good_eps_cover(halfplane_tree, sigma_measure(halfplane_tree), root, [target], eps0=0.3)
    assert cover.alpha == pytest.approx(1.0 / 16)
    assert cover.k == 2
    assert halfplane_tree.cubes.at[int(cover.levels[0][0]), "generation"] == 2
    assert cover.levels[1].tolist() == [target]
    assert cover.passed
    assert cover.worst_ratio == pytest.approx(0.25)
    assert cover.predicted_length == pytest.approx(math.log(16) / math.log(1 / 0.3))


def test_good_cover_rejects_bad_inputs(halfplane_tree) -> None:
    sigma = sigma_measure(halfplane_tree)
    root = int(halfplane_tree.roots[0])
    with pytest.raises(ParameterError):
        good_eps_cover(halfplane_tree, sigma, root, [_deep_cube(halfplane_tree)], eps0=0.5)
    with pytest.raises(ParameterError):
        good_eps_cover(halfplane_tree, sigma, root, [int(halfplane_tree.roots[1])], eps0=0.3)
    with pytest.raises(ParameterError):
        # α = 1/2 is far above ε₀²
        good_eps_cover(halfplane_tree, sigma, root, [int(halfplane_tree.children(root)[0])], eps0=0.3)


def test_tilde_and_descendant_cubes(halfplane_tree) -> None:
    root = int(halfplane_tree.roots[0])
    tilde = tilde_cube(halfplane_tree, root)
    assert halfplane_tree.cubes.at[tilde, "generation"] == 3
    assert halfplane_tree.contains(root, tilde)
    deep = int(halfplane_tree.generation(2)[0])
    assert tilde_cube(halfplane_tree, deep) == -1
    below = descendant_at(halfplane_tree, root, [-0.3, 0.0], 2)
    assert halfplane_tree.cubes.at[below, "generation"] == 2
    assert descendant_at(halfplane_tree, root, [-0.3, 0.0], 9) == -1


def test_test_set_avoids_the_deepest_level(halfplane_tree) -> None:
    root = int(halfplane_tree.roots[0])
    cover = good_eps_cover(halfplane_tree, sigma_measure(halfplane_tree), root, [_deep_cube(halfplane_tree)], eps0=0.3)
    mask = build_test_set(cover, eta=0.5)
    assert not np.any(mask & cover.level_atoms(2))
    assert np.all(cover.level_atoms(1)[mask])
    assert atom_mask(halfplane_tree, [root]).sum() == 16


def test_indicator_solution_stays_in_the_unit_interval(halfplane_problem, halfplane_tree) -> None:
    u = indicator_solution(halfplane_problem, halfplane_tree, np.ones(len(halfplane_tree.atoms), dtype=bool))
    assert u.values.min() >= -1e-12
    assert u.values.max() <= 1.0 + 1e-12
    empty = indicator_solution(halfplane_problem, halfplane_tree, np.zeros(len(halfplane_tree.atoms), dtype=bool))
    assert np.allclose(empty.values, 0.0)


def test_converse_experiment_reports_cones(halfplane_problem, halfplane_builder, halfplane_tree) -> None:
    cache = MeasureCache(halfplane_problem, halfplane_tree)
    root = int(halfplane_tree.roots[0])
    target = [_deep_cube(halfplane_tree)]

    def identity(u) -> Approximator:
        grid = u.grid
        regions = pd.DataFrame({"region": [0], "kind": ["V-red"], "cube": [root], "value": [np.nan], "cells": [grid.n_cells]})
        return Approximator(grid=grid, top=root, eps=0.5, cells=np.arange(grid.n_cells), values=u.values.copy(),
                            region_of=np.zeros(grid.n_cells, dtype=np.int64), regions=regions, gap=0.0)

    report = converse_experiment(halfplane_problem, halfplane_builder, cache, root, target, eps0=0.3, approximate=identity,
                                 eta=0.5, samples=4)
    assert report.cover.k >= 1
    assert 1 <= len(report.cones) <= 4
    assert np.all(report.cones["integral"] >= 0)
    assert np.isfinite(report.ratio)
