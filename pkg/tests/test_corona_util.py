import numpy as np
import pandas as pd
import pytest

from labutils.corona_util import (
    LabeledTree, _stop_reasons, brute_force_packing_norm, carleson_packing_norm, check_coherence, classify_and_pack,
    corona_decompose, decompose_blue, decomposition_table, dyadic_a_infty_curve, fit_a_infty, label_cubes,
    red_yellow_packing, truncated_family
)
from labutils.elliptic_util import TreeMeasure, sigma_measure
from labutils.error_util import ParameterError


def _weighted(tree, weight, pole=(0.0, 10.0)) -> TreeMeasure:
    atom_mass = tree.atoms.mass * weight(tree.atoms.centers)
    return TreeMeasure(tree=tree, atom_mass=atom_mass, cube_mass=tree.cube_masses(atom_mass), kind="omega", pole=pole)


def _skewed(tree) -> TreeMeasure:
    # ten times heavier on (1/2, 1]
    return _weighted(tree, lambda c: np.where(c[:, 0] > 0.5, 10.0, 1.0))


def _all_blue(tree) -> LabeledTree:
    n = len(tree)
    frame = pd.DataFrame({"cube": np.arange(n), "osc": np.zeros(n), "color": np.full(n, "blue", dtype=object),
                          "yellow": np.zeros(n, dtype=bool)})
    return LabeledTree(frame=frame, eps=1.0, slack=0.0)


def test_packing_norm_matches_brute_force(halfplane_tree) -> None:
    rng = np.random.default_rng(5)
    collection = rng.choice(len(halfplane_tree), size=20, replace=False)
    norm, worst = carleson_packing_norm(halfplane_tree, collection)
    assert norm == pytest.approx(brute_force_packing_norm(halfplane_tree, collection))
    assert worst >= 0
    assert carleson_packing_norm(halfplane_tree, []) == (0.0, -1)


def test_packing_norm_of_a_full_generation(halfplane_tree) -> None:
    norm, _ = carleson_packing_norm(halfplane_tree, halfplane_tree.descendants(int(halfplane_tree.roots[0])))
    # one unit per generation below the top
    assert norm == pytest.approx(halfplane_tree.max_depth + 1)


def test_uniform_measure_gives_one_regime_per_root(halfplane_tree) -> None:
    sigma = sigma_measure(halfplane_tree)
    decomposition = corona_decompose(halfplane_tree, lambda q: sigma)
    assert len(decomposition.regimes) == 2
    assert sorted(decomposition.tops.tolist()) == sorted(halfplane_tree.roots.tolist())
    assert len(decomposition.bad) == 0
    assert decomposition.packing == pytest.approx(1.0)
    assert not decomposition.yellow().any()


def test_skewed_measure_stops_and_stays_coherent(halfplane_tree) -> None:
    row = _skewed(halfplane_tree)
    decomposition = corona_decompose(halfplane_tree, lambda q: row, m=4.0)
    assert len(decomposition.regimes) > 2
    assert np.all(decomposition.regime_of >= 0)
    for regime in decomposition.regimes:
        report = check_coherence(halfplane_tree, regime.members, regime.top)
        assert report.passed
        assert regime.band <= 4.0
    assert decomposition.yellow().any()
    norm = brute_force_packing_norm(halfplane_tree, decomposition.tops)
    assert decomposition.packing == pytest.approx(norm)


def test_cubes_without_a_measure_are_bad(halfplane_tree) -> None:
    sigma = sigma_measure(halfplane_tree)
    root = int(halfplane_tree.roots[0])
    decomposition = corona_decompose(halfplane_tree, lambda q: None if q == root else sigma)
    assert root in decomposition.bad
    assert decomposition.regime_of[root] == -1
    with pytest.raises(ParameterError):
        corona_decompose(halfplane_tree, lambda q: sigma, m=1.0)


def test_coherence_detects_a_lone_child(halfplane_tree) -> None:
    root = int(halfplane_tree.roots[0])
    kids = halfplane_tree.children(root)
    assert not check_coherence(halfplane_tree, [root, int(kids[0])], root).children
    grandchild = int(halfplane_tree.children(int(kids[0]))[0])
    assert not check_coherence(halfplane_tree, [root, grandchild], root).closed


def test_a_infty_fit_of_the_surface_measure(halfplane_tree) -> None:
    fit = fit_a_infty([_weighted(halfplane_tree, lambda c: np.ones(len(c)))])
    assert fit.triples > 0
    assert fit.s == pytest.approx(1.0)
    assert fit.c == pytest.approx(1.0)
    # proper subsets hold at most half of the parent
    assert fit.c_at(0.5) == pytest.approx(np.sqrt(0.5))
    with pytest.raises(ParameterError):
        fit.c_at(0.33)
    with pytest.raises(ParameterError):
        fit_a_infty([])


def test_a_infty_fit_of_a_skewed_measure_exceeds_one(halfplane_tree) -> None:
    fit = fit_a_infty([_skewed(halfplane_tree)])
    assert fit.c_at(1.0) > 1.0
    assert fit.worst is not None


def test_dyadic_a_infty_curve_for_the_surface_measure(halfplane_tree) -> None:
    curve = dyadic_a_infty_curve(sigma_measure(halfplane_tree), int(halfplane_tree.roots[0]), 3, [0.25, 0.3, 1.0])
    assert curve["beta"].tolist() == pytest.approx([0.25, 0.25, 1.0])
    with pytest.raises(ParameterError):
        dyadic_a_infty_curve(sigma_measure(halfplane_tree), int(halfplane_tree.generation(4)[0]), 2, [0.5])


def test_labels_of_a_constant_solution_are_blue(halfplane_builder, halfplane_grid) -> None:
    labels = label_cubes(halfplane_builder, np.full(halfplane_grid.n_cells, 0.5), eps=0.5)
    assert len(labels.red) == 0
    assert len(labels.blue) + np.sum(labels.color == "unresolved") == len(halfplane_builder.tree)
    with pytest.raises(ParameterError):
        label_cubes(halfplane_builder, np.full(halfplane_grid.n_cells, 2.0), eps=0.5)


def test_oscillating_solution_has_red_cubes(halfplane_builder, halfplane_grid) -> None:
    u = np.sin(8 * halfplane_grid.centers[:, 0])
    labels = label_cubes(halfplane_builder, u, eps=0.5)
    root = int(halfplane_builder.tree.roots[0])
    assert root in labels.red


def test_blue_subregimes_partition_the_blue_cubes(halfplane_builder, halfplane_tree, halfplane_grid) -> None:
    row = _skewed(halfplane_tree)
    decomposition = corona_decompose(halfplane_tree, lambda q: row)
    u = 1e-4 * halfplane_grid.centers[:, 0]
    labels = label_cubes(halfplane_builder, u, eps=1.0, decomposition=decomposition)
    values = np.full(len(halfplane_tree), 0.0)
    for regime in decomposition.regimes:
        subregimes = decompose_blue(halfplane_builder, regime, labels, values, eps=1.0)
        members = np.concatenate([s.members for s in subregimes]) if subregimes else np.zeros(0, dtype=int)
        blue = [int(q) for q in regime.members if labels.color[q] == "blue"]
        assert sorted(members.tolist()) == sorted(blue)
        for sub in subregimes:
            assert check_coherence(halfplane_tree, sub.members, sub.top).passed
            assert np.all(np.isin(sub.stopping, sub.bottom))
    packing = red_yellow_packing(halfplane_tree, labels, decomposition)
    assert packing.yellow_bound_holds


def test_subregimes_without_stops_are_type_one(halfplane_builder, halfplane_tree, halfplane_grid) -> None:
    sigma = sigma_measure(halfplane_tree)
    decomposition = corona_decompose(halfplane_tree, lambda q: sigma)
    labels = label_cubes(halfplane_builder, np.zeros(halfplane_grid.n_cells), eps=1.0, decomposition=decomposition)
    values = np.zeros(len(halfplane_tree))
    subregimes = [s for r in decomposition.regimes for s in decompose_blue(halfplane_builder, r, labels, values, 1.0)]
    unstopped = [s for s in subregimes if len(s.stopping) == 0]
    report = classify_and_pack(halfplane_tree, subregimes, lam=0.01)
    assert sum(report.counts.values()) == len(subregimes)
    assert all(s.kind == "T1" for s in unstopped)
    assert report.total_packing >= 1.0
    table = decomposition_table(halfplane_tree, decomposition, labels, subregimes)
    assert len(table) == len(halfplane_tree)
    assert set(table["type"]) <= {"", "T1", "T2", "T3", "T4"}
    with pytest.raises(ParameterError):
        classify_and_pack(halfplane_tree, subregimes, lam=1.5)


def test_blue_jump_stops_the_sibling_group(halfplane_builder, halfplane_tree) -> None:
    sigma = sigma_measure(halfplane_tree)
    decomposition = corona_decompose(halfplane_tree, lambda q: sigma)
    root = int(halfplane_tree.roots[0])
    regime = next(r for r in decomposition.regimes if r.top == root)
    left, right = (int(c) for c in halfplane_tree.children(root))
    values = np.zeros(len(halfplane_tree))
    values[halfplane_tree.descendants(right)] = 1.0
    labels = _all_blue(halfplane_tree)
    kids = np.array([left, right])
    reasons = _stop_reasons(kids, labels.color, labels.frame["yellow"].to_numpy(), values, 0.0, eps=1.0)
    assert reasons == {"R": False, "SB": True, "Y": False, "U": False}
    subregimes = decompose_blue(halfplane_builder, regime, labels, values, eps=1.0)
    first = subregimes[0]
    assert first.top == root
    assert first.members.tolist() == [root]
    assert first.classes["SB"].tolist() == sorted([left, right])
    assert first.stopping.tolist() == sorted([left, right])
    assert len(first.classes["R"]) == 0 and len(first.classes["Y"]) == 0
    # below the jump the values are constant again
    assert sorted(s.top for s in subregimes[1:]) == sorted([left, right])
    assert all(len(s.classes["SB"]) == 0 for s in subregimes[1:])


def test_nearly_constant_blue_data_gives_one_subregime(halfplane_builder, halfplane_tree) -> None:
    sigma = sigma_measure(halfplane_tree)
    decomposition = corona_decompose(halfplane_tree, lambda q: sigma)
    assert not decomposition.yellow().any()
    labels = _all_blue(halfplane_tree)
    values = 0.5 + 1e-3 * np.sin(np.arange(len(halfplane_tree)))
    for regime in decomposition.regimes:
        subregimes = decompose_blue(halfplane_builder, regime, labels, values, eps=1.0)
        assert len(subregimes) == 1
        assert len(subregimes[0].classes["SB"]) == 0
        assert len(subregimes[0].stopping) == 0
        assert np.array_equal(subregimes[0].members, np.sort(regime.members))


def test_yellow_cubes_have_a_child_outside_their_regime(halfplane_tree) -> None:
    row = _skewed(halfplane_tree)
    decomposition = corona_decompose(halfplane_tree, lambda q: row)
    owner = np.full(len(halfplane_tree), -1)
    for i, regime in enumerate(decomposition.regimes):
        owner[regime.members] = i
    yellow = decomposition.yellow()
    assert yellow.any()
    for q in np.flatnonzero(owner >= 0):
        kids = halfplane_tree.children(int(q))
        assert yellow[q] == (len(kids) > 0 and bool(np.any(owner[kids] != owner[q])))


def test_truncated_family_fills_the_generation(halfplane_tree) -> None:
    root = int(halfplane_tree.roots[0])
    assert len(truncated_family(halfplane_tree, root, np.zeros(0, dtype=np.int64), 2)) == 4
    child = int(halfplane_tree.children(root)[0])
    family = truncated_family(halfplane_tree, root, np.array([child]), 2)
    assert child in family
    assert len(family) == 3
