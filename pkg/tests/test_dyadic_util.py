import numpy as np
import pytest

from labutils.boundary_util import build_cantor_boundary
from labutils.dyadic_util import atom_sample_points, build_dyadic_tree, check_dyadic_properties
from labutils.error_util import GeometryError, ParameterError


def test_halfplane_generations_halve(halfplane_tree) -> None:
    cubes = halfplane_tree.cubes
    for g in range(halfplane_tree.max_depth + 1):
        ids = halfplane_tree.generation(g)
        assert len(ids) == 2 ** (g + 1)
        assert np.allclose(cubes.loc[ids, "sigma"], 2.0 ** -g)
        assert np.allclose(cubes.loc[ids, "side"], 2.0 ** -g)
    assert len(halfplane_tree.roots) == 2


def test_cantor_generations_split_midlines(cantor2_tree) -> None:
    cubes = cantor2_tree.cubes
    for g in range(5):
        ids = cantor2_tree.generation(g)
        assert len(ids) == 2 ** g
        assert cubes.loc[ids, "sigma"].sum() == pytest.approx(1.0)
    assert cantor2_tree.method == "exact"


def test_cantor_depth_beyond_resolution() -> None:
    with pytest.raises(GeometryError):
        build_dyadic_tree(build_cantor_boundary(2), 5)


def test_depth_out_of_range(halfplane) -> None:
    with pytest.raises(ParameterError):
        build_dyadic_tree(halfplane, 15)


def test_children_parent_and_ancestors(halfplane_tree) -> None:
    root = int(halfplane_tree.roots[0])
    children = halfplane_tree.children(root)
    assert len(children) == 2
    for child in children:
        assert halfplane_tree.parent(int(child)) == root
        assert halfplane_tree.contains(root, int(child))
        assert not halfplane_tree.contains(int(child), root)
    leaf = int(halfplane_tree.generation(4)[0])
    chain = halfplane_tree.ancestors(leaf)
    assert chain[0] == leaf and chain[-1] == root
    assert len(chain) == 5


def test_descendants_in_generation_order(halfplane_tree) -> None:
    root = int(halfplane_tree.roots[1])
    ids = halfplane_tree.descendants(root)
    gens = halfplane_tree.cubes.loc[ids, "generation"].to_numpy()
    assert ids[0] == root
    assert np.all(np.diff(gens) >= 0)
    assert len(ids) == 1 + 2 + 4 + 8 + 16
    shallow = halfplane_tree.descendants(root, include_self=False, max_generation=2)
    assert len(shallow) == 2 + 4


def test_cube_masses_reproduce_sigma(cantor2_tree) -> None:
    masses = cantor2_tree.cube_masses(cantor2_tree.atoms.mass)
    assert np.allclose(masses, cantor2_tree.cubes["sigma"])


def test_siblings_of_a_root_are_the_roots(halfplane_tree) -> None:
    root = int(halfplane_tree.roots[0])
    assert np.array_equal(halfplane_tree.siblings(root), halfplane_tree.roots)


def test_locate_finds_the_nearest_atom(halfplane_tree) -> None:
    atom, distance = halfplane_tree.locate(np.array([[0.3, 0.5], [-0.7, 0.0]]))
    assert distance == pytest.approx([0.5, 0.0])
    g = halfplane_tree.atoms.geometry[atom[0]]
    assert min(g[0], g[2]) <= 0.3 <= max(g[0], g[2])


def test_surface_ball_atoms(halfplane_tree) -> None:
    atoms = halfplane_tree.surface_ball_atoms([0.0, 0.0], 0.25)
    centers = halfplane_tree.atoms.centers[atoms]
    assert np.all(np.abs(centers[:, 0]) <= 0.25)
    # pieces of length 1/16 centered inside (-1/4, 1/4)
    assert len(atoms) == 8


@pytest.mark.parametrize("tree_name", ["halfplane_tree", "cantor2_tree"])
def test_dyadic_properties_hold(tree_name: str, request) -> None:
    tree = request.getfixturevalue(tree_name)
    report = check_dyadic_properties(tree, spacing=1.0 / 64)
    assert report.partition and report.nesting and report.single_parent
    assert report.sigma_additivity_error < 1e-12
    assert report.max_children <= 32
    assert report.passed, report.violations[:5]
    assert 0 < report.a0 <= report.a1
    assert report.n_cubes == len(tree)


def test_atom_samples_are_owned(cantor2_tree) -> None:
    points, owner = atom_sample_points(cantor2_tree, 1.0 / 32)
    assert len(points) == len(owner)
    g = cantor2_tree.atoms.geometry[owner]
    assert np.all((points[:, 0] >= g[:, 0] - 1e-12) & (points[:, 0] <= g[:, 2] + 1e-12))


def test_frame_has_one_row_per_cube(halfplane_tree) -> None:
    frame = halfplane_tree.to_frame()
    assert len(frame) == len(halfplane_tree)
    assert list(frame.columns) == ["generation", "index", "cx", "cy", "side", "sigma", "parent"]
