import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from labutils.dyadic_util import DyadicTree
from labutils.error_util import ParameterError, SolverError
from labutils.grid_util import NEIGHBOR_OFFSETS, CoefficientField, DiscreteField, DomainGrid

logger = logging.getLogger(__name__)

SOLVER_METHODS = ("splu", "cg", "bicgstab")
DEFAULT_TOLERANCE = 1e-10
DEFAULT_MAXITER = 20000

BoundaryData = Union[float, Callable[[np.ndarray], np.ndarray], np.ndarray]


@dataclass
class Carriers:
    """
    Known values coupled into the system: ports on Σ or the outer box, and
    the diagonal ghost cells of the cross-derivative stencil.
    """
    cell: np.ndarray
    weight: np.ndarray
    point: np.ndarray
    outer: np.ndarray

    def __len__(self) -> int:
        return len(self.cell)


def _harmonic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 2.0 * a * b / (a + b)


class EllipticProblem:
    """
    Cell-centered finite volume discretization of -div(A∇u) on a DomainGrid.

    Rows are scaled so that interior faces carry the harmonic mean of the
    face-normal coefficient, i.e. M u ≈ h² · (-div A∇u).
    """

    def __init__(
        self,
        grid: DomainGrid,
        coefficients: CoefficientField,
        method: str = "splu",
        tolerance: float = DEFAULT_TOLERANCE,
        maxiter: int = DEFAULT_MAXITER
    ):
        if method not in SOLVER_METHODS:
            raise ParameterError(f"unknown solver {method!r}, expected one of {SOLVER_METHODS}")
        if coefficients.a11.shape != (grid.ny, grid.nx):
            raise ParameterError("coefficient field does not match the grid")
        self.grid = grid
        self.coefficients = coefficients
        self.method = method
        self.tolerance = tolerance
        self.maxiter = maxiter
        self.ellipticity = coefficients.ellipticity()
        self.matrix, self.carriers, self.face_table = self._assemble()
        self.carrier_matrix = sp.csc_matrix(
            (self.carriers.weight, (self.carriers.cell, np.arange(len(self.carriers)))),
            shape=(grid.n_cells, len(self.carriers))
        )
        self._lu = None
        self._ilu = None

    def _assemble(self) -> Tuple[sp.csc_matrix, Carriers, Dict[str, np.ndarray]]:
        grid = self.grid
        coef = self.coefficients
        rows, cols = grid.cells
        index = grid.cell_index
        n = grid.n_cells
        i_list: List[np.ndarray] = []
        j_list: List[np.ndarray] = []
        v_list: List[np.ndarray] = []
        diagonal = np.zeros(n)
        faces_p, faces_q, faces_t, faces_a = [], [], [], []

        for direction, (dj, di) in enumerate(NEIGHBOR_OFFSETS[::2]):
            a = coef.a11 if direction == 0 else coef.a22
            nj, ni = rows + dj, cols + di
            ok = (nj < grid.ny) & (ni < grid.nx)
            ok[ok] = grid.mask[nj[ok], ni[ok]]
            p = np.flatnonzero(ok)
            q = index[nj[ok], ni[ok]]
            t = _harmonic(a[rows[p], cols[p]], a[nj[ok], ni[ok]])
            i_list += [p, q]
            j_list += [q, p]
            v_list += [-t, -t]
            np.add.at(diagonal, p, t)
            np.add.at(diagonal, q, t)
            faces_p.append(p)
            faces_q.append(q)
            faces_t.append(t)
            faces_a.append(t)

        ports = grid.ports
        a_port = np.where(ports.direction < 2, coef.a11[rows[ports.cell], cols[ports.cell]],
                          coef.a22[rows[ports.cell], cols[ports.cell]])
        t_port = a_port * grid.h / ports.distance
        np.add.at(diagonal, ports.cell, t_port)
        c_cell, c_weight, c_point, c_outer = [ports.cell], [t_port], [ports.point], [ports.outer]

        if not coef.is_diagonal:
            self._cross_terms(rows, cols, i_list, j_list, v_list, c_cell, c_weight, c_point, c_outer)

        i_list.append(np.arange(n))
        j_list.append(np.arange(n))
        v_list.append(diagonal)
        matrix = sp.csc_matrix(
            (np.concatenate(v_list), (np.concatenate(i_list), np.concatenate(j_list))), shape=(n, n)
        )
        carriers = Carriers(
            cell=np.concatenate(c_cell), weight=np.concatenate(c_weight),
            point=np.concatenate(c_point), outer=np.concatenate(c_outer)
        )
        face_table = {
            "p": np.concatenate(faces_p + [ports.cell]),
            "q": np.concatenate(faces_q + [np.full(len(ports), -1)]),
            "t": np.concatenate(faces_t + [t_port]),
            "a": np.concatenate(faces_a + [a_port]),
        }
        logger.info("assembled %d unknowns, %d carriers (%s, Λ=%.3g)",
                    n, len(carriers), coef.descriptor, self.ellipticity)
        return matrix, carriers, face_table

    def _cross_terms(self, rows, cols, i_list, j_list, v_list, c_cell, c_weight, c_point, c_outer) -> None:
        grid = self.grid
        coef = self.coefficients
        oracle = grid.boundary.oracle

        def value(array, dj, di):
            return array[np.clip(rows + dj, 0, grid.ny - 1), np.clip(cols + di, 0, grid.nx - 1)]

        a12_e, a12_w = value(coef.a12, 0, 1), value(coef.a12, 0, -1)
        a21_n, a21_s = value(coef.a21, 1, 0), value(coef.a21, -1, 0)
        stencil = (
            ((1, 1), -0.25 * (a12_e + a21_n)),
            ((-1, 1), 0.25 * (a12_e + a21_s)),
            ((1, -1), 0.25 * (a12_w + a21_n)),
            ((-1, -1), -0.25 * (a12_w + a21_s)),
        )
        for (dj, di), weight in stencil:
            nj, ni = rows + dj, cols + di
            in_box = (nj >= 0) & (nj < grid.ny) & (ni >= 0) & (ni < grid.nx)
            target = np.full(len(rows), -1, dtype=np.int64)
            target[in_box] = grid.cell_index[nj[in_box], ni[in_box]]
            live = weight != 0
            inner = live & (target >= 0)
            i_list.append(np.flatnonzero(inner))
            j_list.append(target[inner])
            v_list.append(weight[inner])
            ghost = np.flatnonzero(live & (target < 0))
            if len(ghost):
                center = np.column_stack([grid.box.x0 + (ni[ghost] + 0.5) * grid.h, grid.box.y0 + (nj[ghost] + 0.5) * grid.h])
                _, near = oracle.nearest(center)
                c_cell.append(ghost)
                c_weight.append(-weight[ghost])
                c_point.append(np.where(in_box[ghost][:, None], near, center))
                c_outer.append(~in_box[ghost])

    def carrier_values(self, data: BoundaryData) -> np.ndarray:
        """Dirichlet data at every carrier; outer-box carriers take zero."""
        if callable(data):
            values = np.asarray(data(self.carriers.point), dtype=float)
        elif np.ndim(data) == 0:
            values = np.full(len(self.carriers), float(data))
        else:
            values = np.asarray(data, dtype=float)
            if values.shape != (len(self.carriers),):
                raise ParameterError("data array must give one value per carrier")
            return values
        values = values.copy()
        values[self.carriers.outer] = 0.0
        return values

    def _factor(self):
        if self._lu is None:
            started = time.perf_counter()
            self._lu = spla.splu(self.matrix.tocsc())
            logger.debug("LU factorization in %.2fs", time.perf_counter() - started)
        return self._lu

    def _iterate(self, matrix: sp.spmatrix, b: np.ndarray) -> np.ndarray:
        residuals: List[float] = []
        norm_b = float(np.linalg.norm(b)) or 1.0
        method = self.method
        if method == "cg" and not self.coefficients.is_symmetric:
            logger.warning("cg requested for a non-symmetric field; using bicgstab")
            method = "bicgstab"

        def record(xk):
            residuals.append(float(np.linalg.norm(matrix @ xk - b)) / norm_b)

        if method == "cg":
            x, info = spla.cg(matrix, b, rtol=self.tolerance, maxiter=self.maxiter, callback=record)
        else:
            if self._ilu is None:
                self._ilu = spla.spilu(self.matrix.tocsc(), drop_tol=1e-5, fill_factor=20)
            ilu = self._ilu
            transposed = matrix is not self.matrix
            preconditioner = spla.LinearOperator(
                matrix.shape, lambda v: ilu.solve(v, trans="T" if transposed else "N")
            )
            x, info = spla.bicgstab(matrix, b, rtol=self.tolerance, maxiter=self.maxiter, M=preconditioner, callback=record)
        if info != 0:
            raise SolverError(f"{method} did not converge (info={info})", method=method, residuals=residuals)
        return x

    def _solve_direct(self, b: np.ndarray, adjoint: bool) -> np.ndarray:
        matrix = self.matrix.T.tocsc() if adjoint else self.matrix
        lu = self._factor()
        trans = "T" if adjoint else "N"
        x = lu.solve(b, trans=trans)
        norm_b = np.linalg.norm(b, axis=0)
        norm_b[norm_b == 0] = 1.0
        residuals = [float(np.max(np.linalg.norm(matrix @ x - b, axis=0) / norm_b))]
        for _ in range(3):
            if residuals[-1] <= self.tolerance:
                break
            x = x + lu.solve(b - matrix @ x, trans=trans)
            residuals.append(float(np.max(np.linalg.norm(matrix @ x - b, axis=0) / norm_b)))
        if residuals[-1] > self.tolerance:
            raise SolverError("direct solve residual above tolerance", method="splu", residuals=residuals)
        return x

    def _solve_vector(self, b: np.ndarray, adjoint: bool) -> np.ndarray:
        matrix = self.matrix.T.tocsc() if adjoint else self.matrix
        return self._iterate(matrix, b)

    def solve_columns(self, columns: np.ndarray, adjoint: bool = False, workers: int = 1) -> np.ndarray:
        """
        Solve M x = b (or Mᵀ x = b) for every column of `columns`.

        Columns are dispatched to a thread pool; results keep column order.
        """
        columns = np.asarray(columns, dtype=float)
        single = columns.ndim == 1
        if single:
            columns = columns[:, None]
        started = time.perf_counter()
        if self.method == "splu":
            solution = self._solve_direct(columns, adjoint)
        elif workers > 1 and columns.shape[1] > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda k: self._solve_vector(columns[:, k], adjoint), range(columns.shape[1])))
            solution = np.column_stack(results)
        else:
            solution = np.column_stack([self._solve_vector(columns[:, k], adjoint) for k in range(columns.shape[1])])
        logger.info("%d %s solve(s) with %s in %.2fs", columns.shape[1], "adjoint" if adjoint else "direct",
                    self.method, time.perf_counter() - started)
        return solution[:, 0] if single else solution

    def unit_source(self, cells: Sequence[int]) -> np.ndarray:
        cells = np.atleast_1d(np.asarray(cells, dtype=np.int64))
        e = np.zeros((self.grid.n_cells, len(cells)))
        e[cells, np.arange(len(cells))] = 1.0
        return e

    def restrict(self, cells: np.ndarray) -> "SubdomainProblem":
        return SubdomainProblem(self, cells)


class SubdomainProblem:
    """
    The Dirichlet problem on a set of Ω cells Ω′: the principal submatrix of
    the parent system, with the remaining Ω cells acting as carriers.
    """

    def __init__(self, parent: EllipticProblem, cells: np.ndarray):
        cells = np.unique(np.asarray(cells, dtype=np.int64))
        if len(cells) == 0:
            raise ParameterError("subdomain has no cells")
        self.parent = parent
        self.cells = cells
        n = parent.grid.n_cells
        self.local = np.full(n, -1, dtype=np.int64)
        self.local[cells] = np.arange(len(cells))
        inside = np.zeros(n, dtype=bool)
        inside[cells] = True
        self.matrix = parent.matrix[cells][:, cells].tocsc()
        coupling = parent.matrix[cells][:, ~inside].tocoo()
        outside_cells = np.flatnonzero(~inside)
        keep = parent.carriers.cell
        keep_mask = inside[keep]
        # carriers: neighboring Ω cells first, then the parent's own carriers
        self.neighbor_cell = outside_cells[coupling.col]
        self.neighbor_row = coupling.row
        self.neighbor_weight = -coupling.data
        self.carrier_row = self.local[keep[keep_mask]]
        self.carrier_weight = parent.carriers.weight[keep_mask]
        self.carrier_index = np.flatnonzero(keep_mask)
        self._lu = None

    def _factor(self):
        if self._lu is None:
            self._lu = spla.splu(self.matrix)
        return self._lu

    def solve(self, b: np.ndarray, adjoint: bool = False) -> np.ndarray:
        lu = self._factor()
        trans = "T" if adjoint else "N"
        x = lu.solve(b, trans=trans)
        matrix = self.matrix.T if adjoint else self.matrix
        norm_b = float(np.linalg.norm(b)) or 1.0
        residual = float(np.linalg.norm(matrix @ x - b)) / norm_b
        if residual > self.parent.tolerance:
            x = x + lu.solve(b - matrix @ x, trans=trans)
            residual = float(np.linalg.norm(matrix @ x - b)) / norm_b
        if residual > self.parent.tolerance:
            raise SolverError("subdomain solve residual above tolerance", method="splu", residuals=[residual])
        return x

    def green(self, pole_cell: int) -> np.ndarray:
        """G_{Ω′}(·, pole) on the subdomain cells."""
        e = np.zeros(len(self.cells))
        e[self._local_pole(pole_cell)] = 1.0
        return self.solve(e)

    def _local_pole(self, pole_cell: int) -> int:
        local = int(self.local[pole_cell])
        if local < 0:
            raise ParameterError("pole is not inside the subdomain", {"cell": int(pole_cell)})
        return local

    def measure(self, pole_cell: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        ω_{Ω′}^{pole} split over neighbor cells and parent carriers, plus the
        adjoint solution (G_{Ω′}(pole, ·)).
        """
        e = np.zeros(len(self.cells))
        e[self._local_pole(pole_cell)] = 1.0
        w = self.solve(e, adjoint=True)
        neighbor_mass = self.neighbor_weight * w[self.neighbor_row]
        carrier_mass = self.carrier_weight * w[self.carrier_row]
        return neighbor_mass, carrier_mass, w


@dataclass
class TreeMeasure:
    """A measure on the boundary atoms and its masses on every cube."""
    tree: DyadicTree
    atom_mass: np.ndarray
    cube_mass: np.ndarray
    kind: str = "sigma"
    pole: Optional[Tuple[float, float]] = None
    leakage: float = 0.0
    notes: Dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(self.atom_mass.sum())

    def ball(self, center: Sequence[float], radius: float) -> float:
        return float(self.atom_mass[self.tree.surface_ball_atoms(center, radius)].sum())

    def additivity_error(self) -> float:
        cubes = self.tree.cubes
        parent = cubes["parent"].to_numpy()
        child = parent >= 0
        sums = np.bincount(parent[child], weights=self.cube_mass[child], minlength=len(cubes))
        internal = cubes["n_children"].to_numpy() > 0
        scale = max(float(np.abs(self.cube_mass).max()), 1e-300)
        return float(np.max(np.abs(sums[internal] - self.cube_mass[internal]))) / scale if np.any(internal) else 0.0


def sigma_measure(tree: DyadicTree) -> TreeMeasure:
    return TreeMeasure(tree=tree, atom_mass=tree.atoms.mass.copy(), cube_mass=tree.cubes["sigma"].to_numpy().copy())


def pole_cell(problem: EllipticProblem, pole: Sequence[float]) -> int:
    """Grid cell holding an interior pole; raises ParameterError for poles on or outside ∂Ω."""
    pole = np.asarray(pole, dtype=float)
    cell = int(problem.grid.locate(pole)[0])
    if cell < 0 or problem.grid.boundary.oracle.distance(pole[None, :])[0] <= 0:
        raise ParameterError(f"pole {tuple(pole)} is not an interior point of Ω", {"pole": pole.tolist()})
    return cell


def solve_dirichlet(
    problem: EllipticProblem,
    data: BoundaryData,
    rhs: Optional[np.ndarray] = None,
    name: str = "u"
) -> DiscreteField:
    """
    Solve -div(A∇u) = rhs in Ω with u = data on Σ and zero on the outer box.

    Args:
        problem: The assembled problem.
        data: A constant, a callable on (n, 2) boundary points, or one value per carrier.
        rhs: Optional source per Ω cell.
        name: Name of the returned field.

    Returns:
        The solution as a DiscreteField.
    """
    g = problem.carrier_values(data)
    b = problem.carrier_matrix @ g
    if rhs is not None:
        b = b + np.asarray(rhs, dtype=float) * problem.grid.h ** 2
    u = problem.solve_columns(b)
    return problem.grid.to_field(u, name=name, attrs={"problem": "dirichlet", "coefficients": problem.coefficients.descriptor})


def maximum_principle_gap(problem: EllipticProblem, u: DiscreteField, data: BoundaryData) -> float:
    """How far u leaves [min data, max data]; zero when the principle holds."""
    g = problem.carrier_values(data)
    positive = problem.carriers.weight > 0
    lo, hi = float(g[positive].min()), float(g[positive].max())
    return float(max(lo - u.values.min(), u.values.max() - hi, 0.0))


def port_measure(problem: EllipticProblem, pole_cells: Sequence[int], workers: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exit distribution over the carriers for each pole from one adjoint solve.

    Returns:
        Tuple of carrier masses (n_carriers, n_poles) and the adjoint solutions
        (n_cells, n_poles), the latter being G(pole, ·).
    """
    w = problem.solve_columns(problem.unit_source(pole_cells), adjoint=True, workers=workers)
    masses = problem.carriers.weight[:, None] * w[problem.carriers.cell]
    return masses, w


def attribute_to_atoms(problem: EllipticProblem, tree: DyadicTree) -> np.ndarray:
    """Atom receiving each carrier's mass, -1 for the outer box."""
    owner = np.full(len(problem.carriers), -1, dtype=np.int64)
    inner = ~problem.carriers.outer
    owner[inner], _ = tree.locate(problem.carriers.point[inner])
    return owner


def elliptic_measure_row(problem: EllipticProblem, tree: DyadicTree, pole: Sequence[float]) -> TreeMeasure:
    """
    Elliptic measure ω^X on the dyadic cubes from a single adjoint solve.

    Args:
        problem: The assembled problem.
        tree: The dyadic tree on Σ.
        pole: Interior point X.

    Returns:
        A TreeMeasure with kind "omega"; leakage to the outer box is kept apart.
    """
    return elliptic_measure_rows(problem, tree, [pole])[0]


def elliptic_measure_rows(
    problem: EllipticProblem,
    tree: DyadicTree,
    poles: Sequence[Sequence[float]],
    workers: int = 1,
    owner: Optional[np.ndarray] = None
) -> List[TreeMeasure]:
    cells = [pole_cell(problem, pole) for pole in poles]
    if owner is None:
        owner = attribute_to_atoms(problem, tree)
    masses, _ = port_measure(problem, cells, workers=workers)
    rows = []
    inner = owner >= 0
    for k, pole in enumerate(poles):
        atom_mass = np.bincount(owner[inner], weights=masses[inner, k], minlength=len(tree.atoms))
        leakage = float(masses[~inner, k].sum())
        measure = TreeMeasure(
            tree=tree, atom_mass=atom_mass, cube_mass=tree.cube_masses(atom_mass), kind="omega",
            pole=(float(pole[0]), float(pole[1])), leakage=leakage
        )
        if leakage > 0.05:
            logger.warning("pole %s leaks %.3f of its mass to the outer box", measure.pole, leakage)
        rows.append(measure)
    return rows


class MeasureCache:
    """Lazily computed ω rows keyed by pole cell."""

    def __init__(self, problem: EllipticProblem, tree: DyadicTree):
        self.problem = problem
        self.tree = tree
        self.owner = attribute_to_atoms(problem, tree)
        self._rows: Dict[int, TreeMeasure] = {}

    def row(self, pole: Sequence[float]) -> TreeMeasure:
        cell = pole_cell(self.problem, pole)
        if cell not in self._rows:
            self._rows[cell] = elliptic_measure_rows(self.problem, self.tree, [pole], owner=self.owner)[0]
        return self._rows[cell]

    def __len__(self) -> int:
        return len(self._rows)


@dataclass
class GreenField:
    pole: Tuple[float, float]
    pole_cell: int
    field: DiscreteField


def green_function(problem: EllipticProblem, pole: Sequence[float]) -> GreenField:
    """G(·, X*) with zero boundary values: M G = e_{X*}."""
    cell = pole_cell(problem, pole)
    values = problem.solve_columns(problem.unit_source([cell])[:, 0])
    field_ = problem.grid.to_field(values, name="G", attrs={"problem": "green", "pole": list(map(float, pole))})
    return GreenField(pole=(float(pole[0]), float(pole[1])), pole_cell=cell, field=field_)


def adjoint_green_values(problem: EllipticProblem, pole: Sequence[float]) -> np.ndarray:
    """G(X*, ·) as a function of the second variable, i.e. G_{L*}(·, X*)."""
    cell = pole_cell(problem, pole)
    return problem.solve_columns(problem.unit_source([cell])[:, 0], adjoint=True)
