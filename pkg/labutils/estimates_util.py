import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from labutils.boundary_util import BoundarySet
from labutils.dyadic_util import DyadicTree
from labutils.elliptic_util import (
    BoundaryData, EllipticProblem, attribute_to_atoms, elliptic_measure_rows, pole_cell, port_measure, solve_dirichlet
)
from labutils.error_util import ParameterError
from labutils.grid_util import CoefficientField, DiscreteField, DomainGrid, build_grid
from labutils.whitney_util import RegionBuilder, carleson_box, cubes_containing, dyadic_cone

logger = logging.getLogger(__name__)

HOLDER_LEVELS = 4
MAX_PRINCIPLE_SLACK = 1e-8


@dataclass
class EstimateReport:
    """Per-ball Caccioppoli ratio, fitted Hölder exponent and Harnack ratio."""
    table: pd.DataFrame
    skipped: List[str] = field(default_factory=list)

    @property
    def max_caccioppoli(self) -> float:
        return float(self.table["caccioppoli"].max()) if len(self.table) else float("nan")

    @property
    def max_harnack(self) -> float:
        return float(self.table["harnack"].max()) if len(self.table) else float("nan")

    @property
    def min_alpha(self) -> float:
        return float(self.table["alpha"].min()) if len(self.table) else float("nan")


def _ball_cells(grid: DomainGrid, center: np.ndarray, radius: float) -> np.ndarray:
    d = np.hypot(grid.centers[:, 0] - center[0], grid.centers[:, 1] - center[1])
    return np.flatnonzero(d < radius)


def _fit_exponent(scales: Sequence[float], values: Sequence[float]) -> float:
    scales = np.asarray(scales, dtype=float)
    values = np.asarray(values, dtype=float)
    ok = values > 0
    if ok.sum() < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(scales[ok]), np.log(values[ok]), 1)
    return float(slope)


def verify_local_estimates(
    u: DiscreteField,
    balls: Sequence[Tuple[float, float, float]],
    dilation: float = 1.0
) -> EstimateReport:
    """
    Caccioppoli, Hölder and Harnack quantities of a solution on sample balls.

    Args:
        u: A solution of Lu=0 on the sampled neighborhoods.
        balls: (x, y, r) triples.
        dilation: a in (1+a)B for the Caccioppoli denominator.

    Returns:
        An EstimateReport; balls whose (1+a)B is not compactly contained in Ω
        are skipped with a note.
    """
    grid = u.grid
    oracle = grid.boundary.oracle
    gradient = u.gradient_norm()
    area = grid.h ** 2
    rows = []
    skipped = []
    for x, y, r in balls:
        center = np.array([x, y], dtype=float)
        big = (1 + dilation) * r
        inside_box = (grid.box.x0 < x - big and x + big < grid.box.x1 and grid.box.y0 < y - big and y + big < grid.box.y1)
        if not inside_box or oracle.distance(center[None, :])[0] <= big or not grid.boundary.in_domain(center[None, :])[0]:
            skipped.append(f"ball ({x:.4g}, {y:.4g}, {r:.4g}) is not compactly contained in Ω")
            continue
        inner = _ball_cells(grid, center, r)
        outer = _ball_cells(grid, center, big)
        if len(inner) == 0:
            skipped.append(f"ball ({x:.4g}, {y:.4g}, {r:.4g}) holds no cell")
            continue
        numerator = float(np.sum(gradient[inner] ** 2) * area)
        denominator = float(np.sum(u.values[outer] ** 2) * area) / r ** 2
        caccioppoli = numerator / denominator if denominator > 0 else 0.0
        scales, oscillations = [], []
        for k in range(HOLDER_LEVELS):
            rho = r * 2.0 ** -k
            cells = _ball_cells(grid, center, rho)
            if rho < 2 * grid.h or len(cells) < 2:
                break
            scales.append(rho)
            oscillations.append(float(np.ptp(u.values[cells])))
        if max(oscillations, default=0.0) <= 1e-14:
            alpha = 1.0
        else:
            alpha = min(_fit_exponent(scales, oscillations), 1.0)
        lo = float(u.values[inner].min())
        harnack = float(u.values[inner].max()) / lo if lo > 0 else float("nan")
        rows.append({"x": x, "y": y, "r": r, "caccioppoli": caccioppoli, "alpha": alpha, "harnack": harnack})
    for note in skipped:
        logger.warning(note)
    return EstimateReport(table=pd.DataFrame(rows, columns=["x", "y", "r", "caccioppoli", "alpha", "harnack"]), skipped=skipped)


@dataclass
class MeasureReport:
    """Measured constants of the elliptic measure estimates over a cube sample."""
    table: pd.DataFrame
    skipped: int = 0

    def _values(self, kind: str) -> np.ndarray:
        return self.table.loc[self.table["kind"] == kind, "value"].to_numpy()

    def _reduce(self, kind: str, reducer) -> float:
        values = self._values(kind)
        return float(reducer(values)) if len(values) else float("nan")

    @property
    def bourgain(self) -> float:
        return self._reduce("bourgain", np.min)

    @property
    def doubling(self) -> float:
        return self._reduce("doubling", np.max)

    @property
    def cfms_range(self) -> Tuple[float, float]:
        return self._reduce("cfms", np.min), self._reduce("cfms", np.max)

    @property
    def change_of_pole_range(self) -> Tuple[float, float]:
        return self._reduce("change_of_pole", np.min), self._reduce("change_of_pole", np.max)

    @property
    def holder_alpha(self) -> float:
        return self._reduce("holder_vanishing", np.min)


def resolved_cubes(builder: RegionBuilder, cubes: Optional[Sequence[int]] = None, min_depth_cells: float = 2.0) -> np.ndarray:
    """Cubes whose corkscrew ball is at least `min_depth_cells` cells deep and lies in an Ω cell."""
    frame = builder.corkscrews
    tree = builder.tree
    cubes = np.arange(len(frame)) if cubes is None else np.asarray(cubes, dtype=np.int64)
    atom_size = 2 * float(tree.atoms.radii.max())
    ok = (
        (frame["gamma"].to_numpy()[cubes] * frame["r"].to_numpy()[cubes] >= min_depth_cells * builder.grid.h)
        & (frame["cell"].to_numpy()[cubes] >= 0)
        & (frame["r"].to_numpy()[cubes] >= 4 * atom_size)
    )
    return cubes[ok]


def verify_measure_estimates(
    problem: EllipticProblem,
    builder: RegionBuilder,
    poles: Sequence[Sequence[float]],
    cubes: Optional[Sequence[int]] = None,
    workers: int = 1
) -> MeasureReport:
    """
    Bourgain, doubling, CFMS, change-of-pole and Hölder-vanishing constants.

    Each sampled cube contributes the ball Δ(x_Q, r_Q) with its corkscrew X_Q;
    the far poles supply ω^X, G(X, ·) and the vanishing solution.

    Args:
        problem: The assembled problem.
        builder: Region builder holding the tree and the corkscrews.
        poles: Far poles X.
        cubes: Cube sample; defaults to every resolved cube.
        workers: Thread pool size for iterative solvers.

    Returns:
        A MeasureReport with one row per measured quantity.
    """
    tree = builder.tree
    frame = builder.corkscrews
    sample = resolved_cubes(builder, cubes)
    owner = attribute_to_atoms(problem, tree)
    rows = []
    skipped = 0
    corkscrews = frame.loc[sample, ["X", "Y"]].to_numpy()
    near_rows = elliptic_measure_rows(problem, tree, corkscrews, workers=workers, owner=owner) if len(sample) else []
    centers = tree.centers()

    for q, row in zip(sample, near_rows):
        r = float(frame.at[q, "r"])
        rows.append({"kind": "bourgain", "cube": int(q), "pole": -1, "value": row.ball(centers[q], r)})

    far_cells = [pole_cell(problem, pole) for pole in poles]
    far_rows = elliptic_measure_rows(problem, tree, poles, workers=workers, owner=owner) if len(poles) else []
    _, green = port_measure(problem, far_cells, workers=workers) if len(poles) else (None, None)
    for k, (pole, far) in enumerate(zip(poles, far_rows)):
        pole = np.asarray(pole, dtype=float)
        for q, near in zip(sample, near_rows):
            x = centers[q]
            r = float(frame.at[q, "r"])
            distance = float(np.hypot(*(pole - x)))
            small = far.ball(x, r)
            if distance >= 8 * r:
                if small > 0:
                    rows.append({"kind": "doubling", "cube": int(q), "pole": k, "value": far.ball(x, 2 * r) / small})
            else:
                skipped += 1
            if distance < 2 * r or small <= 0:
                skipped += 1
                continue
            cell = int(frame.at[q, "cell"])
            rows.append({"kind": "cfms", "cube": int(q), "pole": k, "value": float(green[cell, k]) / small})
            atoms = tree.surface_ball_atoms(x, r)
            for e in tree.descendants(int(q), include_self=False, max_generation=int(tree.cubes.at[q, "generation"]) + 3):
                start, stop = int(tree.cubes.at[e, "start"]), int(tree.cubes.at[e, "stop"])
                if not np.all(np.isin(np.arange(start, stop), atoms)):
                    continue
                far_e = float(far.atom_mass[start:stop].sum())
                if far_e <= 0:
                    continue
                near_e = float(near.atom_mass[start:stop].sum())
                rows.append({"kind": "change_of_pole", "cube": int(e), "pole": k, "value": near_e * small / far_e})
            alpha = _vanishing_exponent(problem, builder, int(q), green[:, k])
            if np.isfinite(alpha):
                rows.append({"kind": "holder_vanishing", "cube": int(q), "pole": k, "value": alpha})
    report = MeasureReport(table=pd.DataFrame(rows, columns=["kind", "cube", "pole", "value"]), skipped=skipped)
    logger.info("measure estimates over %d cubes and %d poles: Bourgain %.3g, doubling %.3g, CFMS %s",
                len(sample), len(poles), report.bourgain, report.doubling, report.cfms_range)
    return report


def _vanishing_exponent(problem: EllipticProblem, builder: RegionBuilder, q: int, values: np.ndarray) -> float:
    row = builder.corkscrews.loc[q]
    hat = np.array([row["hat_x"], row["hat_y"]])
    top = np.array([row["X"], row["Y"]])
    thetas, samples = [], []
    for k in range(6):
        theta = 2.0 ** -k
        point = hat + theta * (top - hat)
        if theta * row["delta"] < 2 * problem.grid.h:
            break
        cell = int(problem.grid.locate(point)[0])
        if cell < 0:
            break
        thetas.append(theta)
        samples.append(float(values[cell]))
    if len(samples) < 2 or samples[0] <= 0:
        return float("nan")
    return _fit_exponent(thetas, np.asarray(samples) / samples[0])


@dataclass
class EnergyIdentity:
    lhs: float
    rhs: float
    ratio: float


def green_energy_identity(
    problem: EllipticProblem,
    u: DiscreteField,
    data: BoundaryData,
    cells: np.ndarray,
    pole: Sequence[float]
) -> EnergyIdentity:
    """
    Both sides of ∬_{Ω′}|∇u|²G_{Ω′}(X*,·) ≈ ∫_{∂Ω′}(u - u(X*))² dω^{X*}_{Ω′}.

    The energy density uses face differences weighted by T_f/ā_f, and the
    boundary side uses the exit masses of the subdomain's adjoint solve.

    Args:
        problem: The assembled problem on Ω.
        u: A solution of Lu=0 in Ω for the given data.
        data: The boundary data u was solved with.
        cells: Ω′ as Ω cells.
        pole: X*.

    Returns:
        lhs, rhs and lhs/rhs (NaN when rhs vanishes).
    """
    pole_cell = int(problem.grid.locate(np.asarray(pole, dtype=float))[0])
    sub = problem.restrict(cells)
    if pole_cell < 0 or sub.local[pole_cell] < 0:
        raise ParameterError("X* is not inside Ω′", {"pole": list(map(float, pole))})
    neighbor_mass, carrier_mass, w = sub.measure(pole_cell)
    g = problem.carrier_values(data)
    center = float(u.values[pole_cell])
    v = u.values - center
    carrier_v = g - center

    matrix = problem.matrix[sub.cells].tocoo()
    off = sub.cells[matrix.row] != matrix.col
    p_local = matrix.row[off]
    q = matrix.col[off]
    t = -matrix.data[off]
    face_a = _face_lookup(problem)
    keys = np.minimum(sub.cells[p_local], q) * problem.grid.n_cells + np.maximum(sub.cells[p_local], q)
    a_bar = np.array([face_a.get(int(key), tt) for key, tt in zip(keys, t)])
    density = np.bincount(p_local, weights=(t / a_bar) * (v[sub.cells[p_local]] - v[q]) ** 2, minlength=len(sub.cells))

    ports = len(problem.grid.ports)
    index = sub.carrier_index
    port_a = problem.face_table["a"][-ports:] if ports else np.zeros(0)
    c_a = np.array([port_a[c] if c < ports else problem.carriers.weight[c] for c in index])
    c_t = problem.carriers.weight[index]
    density += np.bincount(sub.carrier_row, weights=(c_t / c_a) * (v[sub.cells[sub.carrier_row]] - carrier_v[index]) ** 2,
                           minlength=len(sub.cells))
    lhs = 0.5 * float(np.dot(w, density))
    rhs = float(np.dot(neighbor_mass, v[sub.neighbor_cell] ** 2) + np.dot(carrier_mass, carrier_v[index] ** 2))
    ratio = lhs / rhs if rhs > 0 else float("nan")
    logger.info("energy identity on %d cells: lhs=%.6g rhs=%.6g ratio=%.4g", len(sub.cells), lhs, rhs, ratio)
    return EnergyIdentity(lhs=lhs, rhs=rhs, ratio=ratio)


def _face_lookup(problem: EllipticProblem) -> Dict[int, float]:
    table = problem.face_table
    interior = table["q"] >= 0
    p = table["p"][interior]
    q = table["q"][interior]
    keys = np.minimum(p, q) * problem.grid.n_cells + np.maximum(p, q)
    return dict(zip(keys.tolist(), table["a"][interior].tolist()))


@dataclass
class MonotonicityReport:
    pairs: int
    violations: int
    max_excess: float

    @property
    def passed(self) -> bool:
        return self.violations == 0


def green_monotonicity(
    problem: EllipticProblem,
    inner: np.ndarray,
    outer: np.ndarray,
    pairs: Sequence[Tuple[int, int]],
    slack: float = MAX_PRINCIPLE_SLACK
) -> MonotonicityReport:
    """G_{Ω₁}(X, Y) ≤ G_{Ω₂}(X, Y) + slack over (X cell, Y cell) pairs in Ω₁."""
    inner = np.unique(np.asarray(inner, dtype=np.int64))
    outer = np.unique(np.asarray(outer, dtype=np.int64))
    if not np.all(np.isin(inner, outer)):
        raise ParameterError("Ω₁ is not contained in Ω₂")
    small = problem.restrict(inner)
    large = problem.restrict(outer)
    by_pole: Dict[int, List[int]] = {}
    for x, y in pairs:
        by_pole.setdefault(int(x), []).append(int(y))
    violations = 0
    excess = 0.0
    for x, ys in by_pole.items():
        g1 = small.green(x)
        g2 = large.green(x)
        ys = np.asarray(ys, dtype=np.int64)
        diff = g1[small.local[ys]] - g2[large.local[ys]]
        violations += int(np.sum(diff > slack))
        excess = max(excess, float(diff.max()))
    return MonotonicityReport(pairs=len(pairs), violations=violations, max_excess=excess)


def extend_data(problem: EllipticProblem, f: Callable[[np.ndarray], np.ndarray], extend_outer: bool = True) -> np.ndarray:
    """Carrier values of f, evaluated on the outer box too unless `extend_outer` is False."""
    values = np.asarray(f(problem.carriers.point), dtype=float)
    if not extend_outer:
        values = np.where(problem.carriers.outer, 0.0, values)
    return values


@dataclass
class NontangentialReport:
    table: pd.DataFrame
    tolerance: float

    @property
    def converged(self) -> np.ndarray:
        return self.table["converged"].to_numpy()


def nontangential_limit_check(
    problem: EllipticProblem,
    builder: RegionBuilder,
    f: Callable[[np.ndarray], np.ndarray],
    points: Sequence[Sequence[float]],
    top: Optional[int] = None,
    tolerance: float = 0.05,
    extend_outer: bool = True,
    u: Optional[DiscreteField] = None
) -> NontangentialReport:
    """
    u_f along the corkscrews of the cubes holding x, from the top cube down.

    The error is read at the deepest cube whose corkscrew is resolved by the
    grid; N*u is the sup of |u| over the dyadic cone.
    """
    u = u if u is not None else solve_dirichlet(problem, extend_data(problem, f, extend_outer), name="u_f")
    tree = builder.tree
    frame = builder.corkscrews
    resolved = set(resolved_cubes(builder).tolist())
    rows = []
    for x in points:
        x = np.asarray(x, dtype=float)
        target = float(np.asarray(f(x[None, :]), dtype=float)[0])
        chain = cubes_containing(tree, x, top)
        root = int(chain[0]) if top is None else int(top)
        errors = []
        for q in chain:
            if int(q) not in resolved:
                continue
            cell = int(frame.at[q, "cell"])
            errors.append((int(tree.cubes.at[q, "generation"]), abs(float(u.values[cell]) - target), float(u.values[cell])))
        cone = dyadic_cone(builder, x, root)
        nt_max = float(np.max(np.abs(u.values[cone]))) if len(cone) else float("nan")
        generation, error, value = errors[-1] if errors else (-1, float("nan"), float("nan"))
        rows.append({
            "x": x[0], "y": x[1], "target": target, "generation": generation, "value": value,
            "error": error, "converged": bool(error <= tolerance), "nt_max": nt_max
        })
    table = pd.DataFrame(rows, columns=["x", "y", "target", "generation", "value", "error", "converged", "nt_max"])
    failed = int((~table["converged"]).sum())
    if failed:
        logger.warning("%d of %d boundary points show no nontangential convergence", failed, len(table))
    return NontangentialReport(table=table, tolerance=tolerance)


def nontangential_maximal(builder: RegionBuilder, values: np.ndarray, point: Sequence[float], top: int) -> float:
    """N*u(x): sup of |u| over the dyadic cone Γ_{Q₀}(x)."""
    cone = dyadic_cone(builder, point, top)
    return float(np.max(np.abs(values[cone]))) if len(cone) else 0.0


def boundary_harnack_check(
    problem: EllipticProblem,
    builder: RegionBuilder,
    poles: Tuple[Sequence[float], Sequence[float]],
    cubes: Optional[Sequence[int]] = None
) -> float:
    """
    Largest spread of (u/v)(X) / (u/v)(X_Q) over B(x_Q, r_Q) cells for
    u = G(X₁, ·), v = G(X₂, ·), both vanishing on Σ near Q.
    """
    cells = [pole_cell(problem, p) for p in poles]
    _, green = port_measure(problem, cells)
    u, v = green[:, 0], green[:, 1]
    grid = problem.grid
    spread = 1.0
    frame = builder.corkscrews
    centers = builder.tree.centers()
    for q in resolved_cubes(builder, cubes):
        ball = _ball_cells(grid, centers[q], float(frame.at[q, "r"]))
        ball = ball[grid.delta[ball] >= grid.h]
        cell = int(frame.at[q, "cell"])
        if len(ball) == 0 or v[cell] <= 0 or np.any(v[ball] <= 0):
            continue
        reference = u[cell] / v[cell]
        ratio = (u[ball] / v[ball]) / reference
        spread = max(spread, float(ratio.max()), 1.0 / float(ratio.min()))
    return spread


def riesz_formula_check(
    problem: EllipticProblem,
    f: Callable[[np.ndarray], np.ndarray],
    grad_f: Callable[[np.ndarray], np.ndarray],
    pole: Sequence[float]
) -> Tuple[float, float]:
    """
    F(X) against ∬ Aᵀ∇_Y G(X, Y)·∇F(Y) dY for compactly supported F.

    Returns:
        Tuple of F(X) and the integral.
    """
    grid = problem.grid
    cell = pole_cell(problem, pole)
    w = problem.solve_columns(problem.unit_source([cell])[:, 0], adjoint=True)
    gx, gy = grid.to_field(w, name="G").gradient()
    fx, fy = np.asarray(grad_f(grid.centers), dtype=float).T
    coef = problem.coefficients
    rows, cols = grid.cells
    a11, a22 = coef.a11[rows, cols], coef.a22[rows, cols]
    a12, a21 = coef.a12[rows, cols], coef.a21[rows, cols]
    # Aᵀ∇G·∇F
    integrand = (a11 * gx + a21 * gy) * fx + (a12 * gx + a22 * gy) * fy
    integral = float(np.sum(integrand) * grid.h ** 2)
    value = float(np.asarray(f(np.asarray(pole, dtype=float)[None, :]), dtype=float)[0])
    return value, integral


def green_sigma_delta_check(
    problem: EllipticProblem,
    builder: RegionBuilder,
    pole: Sequence[float],
    cubes: Sequence[int]
) -> Tuple[float, float]:
    """
    Band of (G(X*, Y)/δ(Y)) / (ω^{X*}(Q)/σ(Q)) over Y in U_Q for the given cubes.

    Returns:
        Tuple of the smallest and largest ratio.
    """
    tree = builder.tree
    grid = problem.grid
    cell = pole_cell(problem, pole)
    measure = elliptic_measure_rows(problem, tree, [pole])[0]
    _, green = port_measure(problem, [cell])
    sigma = tree.cubes["sigma"].to_numpy()
    lo, hi = np.inf, 0.0
    for q in cubes:
        density = measure.cube_mass[q] / sigma[q]
        region = builder.cells(int(q))
        region = region[(grid.delta[region] >= grid.h) & (region != cell)]
        if density <= 0 or len(region) == 0:
            continue
        ratio = green[region, 0] / grid.delta[region] / density
        lo = min(lo, float(ratio.min()))
        hi = max(hi, float(ratio.max()))
    return (float(lo), float(hi)) if hi > 0 else (float("nan"), float("nan"))


def cme_constant(builder: RegionBuilder, u: DiscreteField, cubes: Optional[Sequence[int]] = None) -> float:
    """sup_Q ∬_{T_Q}|∇u|²δ / σ(Q) over the given cubes."""
    grid = builder.grid
    density = u.gradient_norm() ** 2 * grid.delta * grid.h ** 2
    sigma = builder.tree.cubes["sigma"].to_numpy()
    cubes = range(len(sigma)) if cubes is None else cubes
    best = 0.0
    for q in cubes:
        cells = carleson_box(builder, int(q))
        best = max(best, float(density[cells].sum()) / sigma[q])
    return best


@dataclass
class RefinementReport:
    steps: List[float]
    changes: List[float]

    @property
    def passed(self) -> bool:
        return all(later < 4 * earlier or later <= 1e-12 for earlier, later in zip(self.changes, self.changes[1:]))


def refinement_check(
    boundary: BoundarySet,
    coefficients: Callable[[DomainGrid], CoefficientField],
    data: BoundaryData,
    points: np.ndarray,
    h: float,
    levels: int = 3,
    method: str = "splu"
) -> RefinementReport:
    """Change of u at the given points under successive halvings of h."""
    values = []
    steps = []
    for k in range(levels):
        step = h * 2.0 ** -k
        grid = build_grid(boundary, step)
        problem = EllipticProblem(grid, coefficients(grid), method=method)
        values.append(solve_dirichlet(problem, data).at(points))
        steps.append(step)
    changes = [float(np.max(np.abs(b - a))) for a, b in zip(values, values[1:])]
    report = RefinementReport(steps=steps, changes=changes)
    if not report.passed:
        logger.warning("grid refinement changes grow: %s", changes)
    return report
