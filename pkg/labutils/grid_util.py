import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd
import xarray as xr

from labutils.boundary_util import DIRECTIONS, BoundarySet, Box, segment_meets_box
from labutils.error_util import GeometryError, ParameterError

logger = logging.getLogger(__name__)

# Neighbor offsets (dj, di) in the order of DIRECTIONS.
NEIGHBOR_OFFSETS = ((0, 1), (0, -1), (1, 0), (-1, 0))


@dataclass
class Ports:
    """Boundary faces of the Ω cells; each carries a Dirichlet datum point."""
    cell: np.ndarray
    direction: np.ndarray
    distance: np.ndarray
    point: np.ndarray
    outer: np.ndarray

    def __len__(self) -> int:
        return len(self.cell)


@dataclass
class DomainGrid:
    boundary: BoundarySet
    box: Box
    h: float
    nx: int
    ny: int
    mask: np.ndarray

    @cached_property
    def x(self) -> np.ndarray:
        return self.box.x0 + (np.arange(self.nx) + 0.5) * self.h

    @cached_property
    def y(self) -> np.ndarray:
        return self.box.y0 + (np.arange(self.ny) + 0.5) * self.h

    @cached_property
    def cell_index(self) -> np.ndarray:
        """Unknown number of each Ω cell, -1 elsewhere."""
        index = np.full(self.mask.shape, -1, dtype=np.int64)
        index[self.mask] = np.arange(int(self.mask.sum()))
        return index

    @property
    def n_cells(self) -> int:
        return int(self.mask.sum())

    @cached_property
    def cells(self) -> Tuple[np.ndarray, np.ndarray]:
        """Row and column of every unknown, in unknown order."""
        return np.nonzero(self.mask)

    @cached_property
    def centers(self) -> np.ndarray:
        rows, cols = self.cells
        return np.column_stack([self.x[cols], self.y[rows]])

    @cached_property
    def delta(self) -> np.ndarray:
        """Exact distance from each unknown's center to Σ."""
        return self.boundary.oracle.distance(self.centers)

    @cached_property
    def ports(self) -> Ports:
        return _find_ports(self)

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Unknown number of the cell holding each point, -1 outside Ω."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        i = np.floor((points[:, 0] - self.box.x0) / self.h).astype(np.int64)
        j = np.floor((points[:, 1] - self.box.y0) / self.h).astype(np.int64)
        inside = (i >= 0) & (i < self.nx) & (j >= 0) & (j < self.ny)
        result = np.full(len(points), -1, dtype=np.int64)
        result[inside] = self.cell_index[j[inside], i[inside]]
        return result

    def nearest_cell(self, point) -> int:
        cell = int(self.locate(np.asarray(point, dtype=float))[0])
        if cell < 0:
            raise ParameterError(f"point {tuple(point)} is not inside an Ω cell", {"point": list(point)})
        return cell

    def to_field(self, values: np.ndarray, name: str = "u", attrs: Optional[Dict[str, Any]] = None) -> "DiscreteField":
        data = np.full(self.mask.shape, np.nan)
        data[self.mask] = values
        array = xr.DataArray(data, dims=("y", "x"), coords={"y": self.y, "x": self.x}, name=name, attrs=dict(attrs or {}))
        return DiscreteField(grid=self, values=np.asarray(values, dtype=float), array=array)

    def submask(self, cells: np.ndarray) -> np.ndarray:
        """Grid mask (ny, nx) of a set of unknowns."""
        mask = np.zeros(self.mask.shape, dtype=bool)
        rows, cols = self.cells
        mask[rows[cells], cols[cells]] = True
        return mask

    def mask_cells(self, mask: np.ndarray) -> np.ndarray:
        """Unknowns inside a grid mask (ny, nx)."""
        return self.cell_index[mask & self.mask]


def build_grid(boundary: BoundarySet, h: float, box: Optional[Box] = None) -> DomainGrid:
    """
    Cell-centered discretization of Ω inside the truncation box.

    A cell belongs to Ω when Σ does not meet its open interior and its center
    is not excluded.

    Args:
        boundary: The boundary set.
        h: Cell size; the box sides must be multiples of h.
        box: Truncation box, default the boundary's ambient box.

    Returns:
        The DomainGrid.
    """
    box = box or boundary.ambient_box
    if h <= 0:
        raise ParameterError(f"h must be positive, got {h}")
    nx = int(round(box.width / h))
    ny = int(round(box.height / h))
    if abs(nx * h - box.width) > 1e-9 * box.width or abs(ny * h - box.height) > 1e-9 * box.height:
        raise ParameterError(f"box {box.as_tuple()} is not a whole number of cells of size {h}")
    if nx > 65535 or ny > 65535:
        raise ParameterError("grid dimensions exceed 65535 cells per side")

    xs = box.x0 + (np.arange(nx) + 0.5) * h
    ys = box.y0 + (np.arange(ny) + 0.5) * h
    gx, gy = np.meshgrid(xs, ys)
    centers = np.column_stack([gx.ravel(), gy.ravel()])
    mask = ~boundary.is_excluded(centers).reshape(ny, nx)

    oracle = boundary.oracle
    for geometry, is_box in zip(oracle.geometry, oracle.is_box):
        i0 = max(int(np.floor((min(geometry[0], geometry[2]) - box.x0) / h)) - 1, 0)
        i1 = min(int(np.floor((max(geometry[0], geometry[2]) - box.x0) / h)) + 2, nx)
        j0 = max(int(np.floor((min(geometry[1], geometry[3]) - box.y0) / h)) - 1, 0)
        j1 = min(int(np.floor((max(geometry[1], geometry[3]) - box.y0) / h)) + 2, ny)
        if i0 >= i1 or j0 >= j1:
            continue
        jj, ii = np.meshgrid(np.arange(j0, j1), np.arange(i0, i1), indexing="ij")
        cx0 = box.x0 + ii.ravel() * h
        cy0 = box.y0 + jj.ravel() * h
        cells = np.column_stack([cx0, cy0, cx0 + h, cy0 + h])
        if is_box:
            hit = (cells[:, 0] < geometry[2]) & (cells[:, 2] > geometry[0]) & (cells[:, 1] < geometry[3]) & (cells[:, 3] > geometry[1])
        else:
            hit = segment_meets_box(np.repeat(geometry[None, :], len(cells), axis=0), cells, open_box=True)
        mask[jj.ravel()[hit], ii.ravel()[hit]] = False

    grid = DomainGrid(boundary=boundary, box=box, h=float(h), nx=nx, ny=ny, mask=mask)
    logger.info("grid %dx%d at h=%.4g: %d Ω cells", nx, ny, h, grid.n_cells)
    return grid


def _find_ports(grid: DomainGrid) -> Ports:
    rows, cols = grid.cells
    h = grid.h
    oracle = grid.boundary.oracle
    parts = []
    for direction, (dj, di) in enumerate(NEIGHBOR_OFFSETS):
        nj, ni = rows + dj, cols + di
        inside_box = (nj >= 0) & (nj < grid.ny) & (ni >= 0) & (ni < grid.nx)
        neighbor_in = np.zeros(len(rows), dtype=bool)
        neighbor_in[inside_box] = grid.mask[nj[inside_box], ni[inside_box]]
        port = np.flatnonzero(~neighbor_in)
        if len(port) == 0:
            continue
        start = grid.centers[port]
        t = oracle.ray_distance(start, direction, h)
        outer = ~inside_box[port] & ~(t <= 0.5 * h * (1 + 1e-9))
        t = np.where(outer, 0.5 * h, np.clip(np.where(np.isfinite(t), t, h), 0.5 * h, h))
        hit = start + t[:, None] * DIRECTIONS[direction]
        point = hit.copy()
        sigma = ~outer
        if np.any(sigma):
            _, point[sigma] = oracle.nearest(hit[sigma])
        parts.append((port, np.full(len(port), direction), t, point, outer))
    if not parts:
        raise GeometryError("grid has no boundary faces")
    cell = np.concatenate([p[0] for p in parts])
    order = np.lexsort((np.concatenate([p[1] for p in parts]), cell))
    ports = Ports(
        cell=cell[order],
        direction=np.concatenate([p[1] for p in parts])[order],
        distance=np.concatenate([p[2] for p in parts])[order],
        point=np.concatenate([p[3] for p in parts])[order],
        outer=np.concatenate([p[4] for p in parts])[order]
    )
    logger.debug("%d ports, %d on the outer box", len(ports), int(ports.outer.sum()))
    return ports


@dataclass
class CoefficientField:
    """Per-cell matrix A(X) = [[a11, a12], [a21, a22]] on the full box grid."""
    a11: np.ndarray
    a22: np.ndarray
    a12: np.ndarray
    a21: np.ndarray
    descriptor: str = "identity"
    identity_outside: Optional[float] = None
    notes: Dict[str, Any] = field(default_factory=dict)

    @property
    def is_diagonal(self) -> bool:
        return not (np.any(self.a12) or np.any(self.a21))

    @property
    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.a12, self.a21))

    def transpose(self) -> "CoefficientField":
        return CoefficientField(self.a11, self.a22, self.a21, self.a12, self.descriptor + "^T", self.identity_outside, dict(self.notes))

    def ellipticity(self) -> float:
        """
        Measured Λ: the larger of the entry bound and the inverse coercivity
        over a sample of unit directions (axes and diagonals included).
        """
        angles = np.linspace(0.0, np.pi, 16, endpoint=False)
        xi = np.column_stack([np.cos(angles), np.sin(angles)])
        a11, a22, a12, a21 = (a.ravel() for a in (self.a11, self.a22, self.a12, self.a21))
        form = (a11[:, None] * xi[None, :, 0] ** 2 + a22[:, None] * xi[None, :, 1] ** 2
                + (a12 + a21)[:, None] * (xi[None, :, 0] * xi[None, :, 1]))
        coercivity = float(form.min())
        if coercivity <= 0:
            raise ParameterError("coefficient field is not elliptic", {"coercivity": coercivity})
        bound = float(max(np.abs(a).max() for a in (a11, a22, a12, a21)))
        return max(bound, 1.0 / coercivity)

    def is_identity_outside(self, grid: DomainGrid, radius: float = 1.0) -> bool:
        gx, gy = np.meshgrid(grid.x, grid.y)
        outside = np.hypot(gx, gy) >= radius
        return bool(
            np.all(self.a11[outside] == 1.0) and np.all(self.a22[outside] == 1.0)
            and np.all(self.a12[outside] == 0.0) and np.all(self.a21[outside] == 0.0)
        )

    def to_frame(self) -> pd.DataFrame:
        j, i = np.nonzero(np.ones(self.a11.shape, dtype=bool))
        frame = pd.DataFrame({"i": i, "j": j, "a11": self.a11.ravel(), "a22": self.a22.ravel()})
        if not self.is_diagonal:
            frame["a12"] = self.a12.ravel()
            frame["a21"] = self.a21.ravel()
        return frame


def identity_coefficients(grid: DomainGrid) -> CoefficientField:
    shape = (grid.ny, grid.nx)
    return CoefficientField(np.ones(shape), np.ones(shape), np.zeros(shape), np.zeros(shape), "identity", identity_outside=0.0)


def diagonal_coefficients(grid: DomainGrid, a11: float, a22: float) -> CoefficientField:
    shape = (grid.ny, grid.nx)
    return CoefficientField(
        np.full(shape, float(a11)), np.full(shape, float(a22)), np.zeros(shape), np.zeros(shape),
        f"diagonal({a11:g},{a22:g})"
    )


def diagonal_radial_coefficients(grid: DomainGrid, strength: float = 1.0, radius: float = 1.0) -> CoefficientField:
    """
    Placeholder anisotropic field equal to the identity outside B(0, radius).
    Not one of the structured matrices with A_infty elliptic measure; used for plumbing and comparison runs only.
    """
    if strength < 0:
        raise ParameterError("strength must be nonnegative")
    gx, gy = np.meshgrid(grid.x, grid.y)
    bump = np.clip(1.0 - np.hypot(gx, gy) / radius, 0.0, None)
    bump[np.hypot(gx, gy) >= radius] = 0.0
    a11 = 1.0 + strength * bump
    a22 = 1.0 / a11
    zero = np.zeros_like(a11)
    return CoefficientField(a11, a22, zero, zero.copy(), f"diagonal-radial({strength:g}) [placeholder]", identity_outside=radius)


def coefficients_from_table(grid: DomainGrid, table: pd.DataFrame, descriptor: str = "table") -> CoefficientField:
    """Cells absent from the table carry the identity."""
    field_ = identity_coefficients(grid)
    field_.descriptor = descriptor
    field_.identity_outside = None
    i = table["i"].to_numpy(dtype=np.int64)
    j = table["j"].to_numpy(dtype=np.int64)
    if np.any((i < 0) | (i >= grid.nx) | (j < 0) | (j >= grid.ny)):
        raise ParameterError("coefficient table has cells outside the grid")
    field_.a11[j, i] = table["a11"].to_numpy(dtype=float)
    field_.a22[j, i] = table["a22"].to_numpy(dtype=float)
    if "a12" in table:
        field_.a12[j, i] = table["a12"].to_numpy(dtype=float)
    if "a21" in table:
        field_.a21[j, i] = table["a21"].to_numpy(dtype=float)
    field_.ellipticity()
    return field_


@dataclass
class DiscreteField:
    """A grid function on the Ω cells plus its labelled xarray view."""
    grid: DomainGrid
    values: np.ndarray
    array: xr.DataArray

    @property
    def attrs(self) -> Dict[str, Any]:
        return self.array.attrs

    def at(self, points: np.ndarray) -> np.ndarray:
        cells = self.grid.locate(points)
        result = np.full(len(cells), np.nan)
        result[cells >= 0] = self.values[cells[cells >= 0]]
        return result

    def gradient(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Finite-difference gradient per unknown: central where both neighbors
        are Ω cells, one-sided where only one is, zero where none is.
        """
        data = self.array.to_numpy()
        h = self.grid.h
        padded = np.pad(data, 1, constant_values=np.nan)
        rows, cols = self.grid.cells
        r, c = rows + 1, cols + 1
        result = []
        for (dj1, di1), (dj2, di2) in (((0, 1), (0, -1)), ((1, 0), (-1, 0))):
            forward = padded[r + dj1, c + di1] - padded[r, c]
            backward = padded[r, c] - padded[r + dj2, c + di2]
            stacked = np.stack([forward, backward])
            count = np.sum(~np.isnan(stacked), axis=0)
            result.append(np.nansum(stacked, axis=0) / np.maximum(count, 1) / h)
        return result[0], result[1]

    def gradient_norm(self) -> np.ndarray:
        gx, gy = self.gradient()
        return np.hypot(gx, gy)

    def sup(self) -> float:
        return float(np.max(np.abs(self.values))) if len(self.values) else 0.0
