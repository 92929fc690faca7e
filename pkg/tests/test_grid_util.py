import numpy as np
import pandas as pd
import pytest

from labutils.boundary_util import Box
from labutils.error_util import ParameterError
from labutils.grid_util import (
    build_grid, coefficients_from_table, diagonal_coefficients, diagonal_radial_coefficients, identity_coefficients
)


def test_halfplane_grid_is_the_whole_box(halfplane_grid) -> None:
    assert (halfplane_grid.nx, halfplane_grid.ny) == (64, 64)
    assert halfplane_grid.n_cells == 64 * 64
    assert np.allclose(halfplane_grid.delta, halfplane_grid.centers[:, 1])


def test_ports_on_the_line_and_the_outer_box(halfplane_grid) -> None:
    ports = halfplane_grid.ports
    assert len(ports) == 4 * 64
    assert int(ports.outer.sum()) == 3 * 64
    line = ~ports.outer
    assert np.all(ports.direction[line] == 3)
    assert np.allclose(ports.point[line, 1], 0.0)
    assert np.allclose(ports.distance[line], 0.5 * halfplane_grid.h)


def test_grid_must_tile_the_box(halfplane) -> None:
    with pytest.raises(ParameterError):
        build_grid(halfplane, 0.3)
    with pytest.raises(ParameterError):
        build_grid(halfplane, 0.0)


def test_cantor_grid_avoids_the_squares(cantor2) -> None:
    grid = build_grid(cantor2, 1.0 / 16, box=Box(-1.5, -1.5, 1.5, 1.5))
    assert not cantor2.is_excluded(grid.centers).any()
    assert grid.n_cells < grid.nx * grid.ny
    assert np.all(grid.delta > 0)


def test_disk_grid_stays_inside(disk_grid) -> None:
    radius = np.hypot(disk_grid.centers[:, 0], disk_grid.centers[:, 1])
    assert radius.max() < 1.0
    assert disk_grid.ports.outer.sum() == 0


def test_locate_and_nearest_cell(halfplane_grid) -> None:
    cells = halfplane_grid.locate(np.array([[0.01, 0.01], [5.0, 5.0]]))
    assert cells[1] == -1
    assert np.allclose(halfplane_grid.centers[cells[0]], [0.015625, 0.015625])
    with pytest.raises(ParameterError):
        halfplane_grid.nearest_cell([0.0, -0.5])


def test_field_gradient_of_a_linear_function(halfplane_grid) -> None:
    values = 2.0 * halfplane_grid.centers[:, 0] - halfplane_grid.centers[:, 1]
    field = halfplane_grid.to_field(values, name="affine")
    gx, gy = field.gradient()
    assert np.allclose(gx, 2.0)
    assert np.allclose(gy, -1.0)
    assert field.array.dims == ("y", "x")
    assert field.sup() == pytest.approx(np.abs(values).max())
    assert field.at(np.array([[0.5, 0.5]]))[0] == pytest.approx(values[halfplane_grid.locate(np.array([[0.5, 0.5]]))[0]])


def test_submask_round_trip(halfplane_grid) -> None:
    cells = np.array([0, 5, 100, 4095])
    mask = halfplane_grid.submask(cells)
    assert mask.sum() == 4
    assert np.array_equal(halfplane_grid.mask_cells(mask), cells)


def test_ellipticity_of_standard_fields(halfplane_grid) -> None:
    assert identity_coefficients(halfplane_grid).ellipticity() == pytest.approx(1.0)
    assert diagonal_coefficients(halfplane_grid, 1.0, 2.0).ellipticity() == pytest.approx(2.0)
    radial = diagonal_radial_coefficients(halfplane_grid, 0.5, 1.0)
    assert 1.0 <= radial.ellipticity() <= 1.5 + 1e-12
    assert radial.is_identity_outside(halfplane_grid, 1.0)
    assert radial.is_diagonal and radial.is_symmetric


def test_non_elliptic_field_is_rejected(halfplane_grid) -> None:
    with pytest.raises(ParameterError):
        diagonal_coefficients(halfplane_grid, 1.0, -1.0).ellipticity()
    with pytest.raises(ParameterError):
        diagonal_radial_coefficients(halfplane_grid, -1.0)


def test_coefficient_table_overrides_cells(halfplane_grid) -> None:
    table = pd.DataFrame({"i": [0, 1], "j": [0, 0], "a11": [2.0, 3.0], "a22": [1.0, 1.0], "a12": [0.5, 0.0], "a21": [0.0, 0.0]})
    field = coefficients_from_table(halfplane_grid, table)
    assert field.a11[0, 1] == 3.0
    assert not field.is_symmetric
    assert field.transpose().a21[0, 0] == 0.5
    frame = field.to_frame()
    assert {"a12", "a21"} <= set(frame.columns)
    bad = table.assign(i=[0, 99])
    with pytest.raises(ParameterError):
        coefficients_from_table(halfplane_grid, bad)
