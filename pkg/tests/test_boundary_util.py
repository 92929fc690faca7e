import numpy as np
import pytest

from labutils.boundary_util import (
    Box, _ball_box_fraction, build_cantor_boundary, build_disk_boundary, build_segment_boundary, cantor_squares,
    check_ahlfors_regularity, points_in_polygon, sample_boundary_centers, sample_boundary_points, union_boundary
)
from labutils.error_util import ParameterError


@pytest.mark.parametrize("generation", [0, 1, 2, 3])
def test_cantor_squares_count_side_and_measure(generation: int) -> None:
    squares = cantor_squares(generation)
    assert squares.shape == (4 ** generation, 4)
    sides = squares[:, 2] - squares[:, 0]
    assert np.allclose(sides, 4.0 ** -generation)
    assert np.allclose(squares[:, 3] - squares[:, 1], sides)
    assert build_cantor_boundary(generation).measure == pytest.approx(1.0)


def test_cantor_children_stay_in_parent_corners() -> None:
    parents = cantor_squares(1)
    children = cantor_squares(2)
    for p, block in zip(parents, children.reshape(4, 4, 4)):
        assert np.all(block[:, 0] >= p[0] - 1e-15) and np.all(block[:, 2] <= p[2] + 1e-15)
        assert np.all(block[:, 1] >= p[1] - 1e-15) and np.all(block[:, 3] <= p[3] + 1e-15)


def test_cantor_generation_out_of_range() -> None:
    with pytest.raises(ParameterError):
        build_cantor_boundary(9)
    with pytest.raises(ParameterError):
        build_cantor_boundary(-1)


def test_cantor_with_line_adds_clipped_length() -> None:
    boundary = build_cantor_boundary(3, include_line=True, line_offset=-2.0)
    assert len(boundary.components) == 2
    assert boundary.squares.shape[0] == 64
    # default box is [-2.5, 2.5] wide
    assert boundary.measure == pytest.approx(1.0 + 5.0)


def test_line_must_lie_below_the_squares() -> None:
    with pytest.raises(ParameterError):
        build_cantor_boundary(2, include_line=True, line_offset=0.0)


def test_halfplane_domain_membership(halfplane) -> None:
    points = np.array([[0.0, 0.5], [0.0, -0.5], [0.0, 0.0], [3.0, 0.5]])
    assert halfplane.in_domain(points).tolist() == [True, False, False, False]
    assert halfplane.is_excluded(points[:2]).tolist() == [False, True]


def test_cantor_excludes_square_interiors(cantor2) -> None:
    inside = cantor2.squares[0, :2] + 0.5 * (cantor2.squares[0, 2:] - cantor2.squares[0, :2])
    assert cantor2.is_excluded(inside[None, :])[0]
    assert not cantor2.is_excluded(np.array([[0.0, 0.0]]))[0]


def test_distance_oracle_halfplane(halfplane) -> None:
    points = np.array([[0.0, 0.25], [0.5, 1.0], [-0.3, 0.125]])
    assert np.allclose(halfplane.oracle.distance(points), [0.25, 1.0, 0.125])
    _, nearest = halfplane.oracle.nearest(points)
    assert np.allclose(nearest[:, 1], 0.0)
    assert np.allclose(nearest[:, 0], points[:, 0])


def test_distance_oracle_cantor_matches_brute_force(cantor2) -> None:
    rng = np.random.default_rng(7)
    points = rng.uniform(-1.0, 1.0, size=(200, 2))
    squares = cantor2.squares
    dx = np.maximum.reduce([squares[None, :, 0] - points[:, None, 0], np.zeros((200, 16)), points[:, None, 0] - squares[None, :, 2]])
    dy = np.maximum.reduce([squares[None, :, 1] - points[:, None, 1], np.zeros((200, 16)), points[:, None, 1] - squares[None, :, 3]])
    expected = np.hypot(dx, dy).min(axis=1)
    assert np.allclose(cantor2.oracle.distance(points), expected, atol=1e-12)


def test_disk_perimeter_and_interior() -> None:
    disk = build_disk_boundary(1.0, 512)
    assert disk.measure == pytest.approx(2 * np.pi, rel=1e-4)
    assert disk.in_domain(np.array([[0.0, 0.0], [0.5, 0.5]])).all()
    assert not disk.is_excluded(np.array([[0.2, -0.3]]))[0]
    assert disk.is_excluded(np.array([[1.1, 0.0]]))[0]


def test_points_in_polygon_square() -> None:
    square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]])
    points = np.array([[0.5, 0.5], [1.5, 0.5], [0.25, 0.9]])
    assert points_in_polygon(points, square).tolist() == [True, False, True]


def test_segment_needs_distinct_endpoints() -> None:
    with pytest.raises(ParameterError):
        build_segment_boundary([0.0, 0.0], [0.0, 0.0], box=Box(-1, -1, 1, 1))


def test_union_keeps_every_component(halfplane, cantor2) -> None:
    union = union_boundary([halfplane, cantor2])
    assert len(union.components) == 2
    assert union.measure == pytest.approx(halfplane.measure + cantor2.measure)
    with pytest.raises(ParameterError):
        union_boundary([])


def test_ahlfors_ratio_on_a_line(halfplane) -> None:
    report = check_ahlfors_regularity(halfplane, [0.25, 0.5], points=np.array([[0.0, 0.0]]))
    assert report.c_min == pytest.approx([2.0, 2.0])
    assert report.c_max == pytest.approx([2.0, 2.0])
    assert report.constant == pytest.approx(2.0)


def test_ahlfors_constant_bounded_for_cantor(cantor2) -> None:
    report = check_ahlfors_regularity(cantor2, [4.0 ** -1, 4.0 ** -2], centers=64, seed=3)
    assert report.n_centers == 64
    assert 1.0 <= report.constant <= 16.0


def test_boundary_samples_lie_on_the_boundary(cantor2, halfplane) -> None:
    for boundary in (cantor2, halfplane):
        points = sample_boundary_points(boundary, 1.0 / 32)
        assert len(points) > 0
        assert np.allclose(boundary.oracle.distance(points), 0.0, atol=1e-12)


def test_random_centers_are_reproducible(cantor2) -> None:
    a = sample_boundary_centers(cantor2, 20, seed=11)
    b = sample_boundary_centers(cantor2, 20, seed=11)
    assert np.array_equal(a, b)
    assert np.allclose(cantor2.oracle.distance(a), 0.0, atol=1e-12)


def test_piece_table_sums_to_measure(cantor2) -> None:
    table = cantor2.piece_table()
    assert len(table) == 16
    assert table["measure"].sum() == pytest.approx(cantor2.measure)


@pytest.mark.parametrize("center, r, expected", [
    ((0.5, 0.5), 0.75, 1.0),
    ((0.5, 0.5), 0.2, np.pi * 0.04),
    ((0.0, 0.0), 0.5, np.pi / 16),
    ((0.5, 0.0), 0.25, np.pi / 32),
    ((2.0, 0.5), 0.75, 0.0),
    ((3.0, 3.0), 0.5, 0.0),
])
def test_ball_box_fraction_is_the_exact_area(center, r, expected) -> None:
    boxes = np.array([[0.0, 0.0, 1.0, 1.0]])
    fraction = _ball_box_fraction(np.array([center]), r, boxes)
    assert fraction[0] == pytest.approx(expected, abs=1e-12)


def test_ball_box_fraction_of_a_straddling_disk() -> None:
    # center on the right edge, radius past the top and bottom
    boxes = np.array([[0.0, 0.0, 1.0, 1.0]])
    r = 0.75
    fraction = _ball_box_fraction(np.array([[1.0, 0.5]]), r, boxes)[0]
    w = np.sqrt(r * r - 0.25)
    # half disk minus the two caps beyond y = 0 and y = 1
    cap = r * r * np.arccos(0.5 / r) - 0.5 * w
    assert fraction == pytest.approx(0.5 * (np.pi * r * r - 2 * cap), rel=1e-10)
