import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from labutils.approx_util import (Approximator, MollifiedApproximator, carleson_l1_norm, mollify, nontangential_trace,
                                  trace_on_atoms)
from labutils.corona_util import carleson_packing_norm
from labutils.dyadic_util import DyadicTree
from labutils.elliptic_util import EllipticProblem, attribute_to_atoms, solve_dirichlet
from labutils.error_util import ParameterError
from labutils.grid_util import DiscreteField, DomainGrid
from labutils.whitney_util import RegionBuilder, carleson_box

logger = logging.getLogger(__name__)

DEFAULT_ITERATIONS = 6
MAX_ITERATIONS = 10
STOP_BAND = 2.0
MAX_EXCLUDED = 0.1


@dataclass
class BmoFunction:
    """Boundary values per atom with their dyadic BMO norm and f = f₀ + g."""
    tree: DyadicTree
    values: np.ndarray
    norm: float
    bounded: np.ndarray
    terms: pd.DataFrame
    packing: float

    @property
    def step(self) -> np.ndarray:
        """g = Σ α_j 𝟙_{Q_j} on the atoms."""
        g = np.zeros(len(self.values))
        cubes = self.tree.cubes
        for q, alpha in zip(self.terms["cube"], self.terms["alpha"]):
            g[cubes.at[q, "start"]:cubes.at[q, "stop"]] += alpha
        return g

    @property
    def c_dec(self) -> float:
        return float(np.max(np.abs(self.bounded))) / self.norm if self.norm > 0 else 0.0

    @property
    def c_alpha(self) -> float:
        if self.terms.empty or self.norm <= 0:
            return 0.0
        return float(self.terms["alpha"].abs().max()) / self.norm


def cube_means(tree: DyadicTree, values: np.ndarray) -> np.ndarray:
    sigma = tree.cubes["sigma"].to_numpy()
    return tree.cube_masses(values * tree.atoms.mass) / np.where(sigma > 0, sigma, 1.0)


def dyadic_bmo_norm(tree: DyadicTree, values: np.ndarray) -> float:
    """sup_Q σ(Q)⁻¹ ∫_Q |f - ⟨f⟩_Q| dσ over every cube."""
    means = cube_means(tree, values)
    mass = tree.atoms.mass
    frame = tree.cubes
    best = 0.0
    for q, (start, stop, sigma) in enumerate(zip(frame["start"], frame["stop"], frame["sigma"])):
        if sigma <= 0:
            continue
        oscillation = float(np.dot(mass[start:stop], np.abs(values[start:stop] - means[q]))) / sigma
        best = max(best, oscillation)
    return best


def bmo_norm_and_decompose(tree: DyadicTree, values: np.ndarray, band: float = STOP_BAND) -> BmoFunction:
    """
    Dyadic BMO norm and the stopping-time split f = f₀ + g.

    Below each top cube (starting at the roots) the stopping cubes are the
    maximal cubes whose mean leaves ⟨f⟩_top by more than band·‖f‖_BMO; each
    adds α_j = ⟨f⟩_{Q_j} - ⟨f⟩_top and becomes a top in turn.

    Raises:
        ParameterError: If f is not finite at atom resolution.
    """
    values = np.asarray(values, dtype=float)
    if len(values) != len(tree.atoms):
        raise ParameterError("need one value per atom")
    if not np.all(np.isfinite(values)):
        raise ParameterError("f is unbounded at atom resolution")
    norm = dyadic_bmo_norm(tree, values)
    means = cube_means(tree, values)
    rows = []
    if norm > 0:
        stack = [(int(r), int(r)) for r in tree.roots[::-1]]
        while stack:
            q, top = stack.pop()
            for child in tree.children(q)[::-1]:
                child = int(child)
                if abs(means[child] - means[top]) > band * norm:
                    rows.append({"cube": child, "alpha": float(means[child] - means[top])})
                    stack.append((child, child))
                else:
                    stack.append((child, top))
    terms = pd.DataFrame(rows, columns=["cube", "alpha"]).sort_values("cube", kind="stable").reset_index(drop=True)
    packing, _ = carleson_packing_norm(tree, terms["cube"].to_numpy()) if len(terms) else (0.0, -1)
    result = BmoFunction(tree=tree, values=values, norm=norm, bounded=values, terms=terms, packing=packing)
    result.bounded = values - result.step
    logger.info("dyadic BMO norm %.4g, %d stopping cubes, packing %.3g", norm, len(terms), packing)
    return result


def atom_data(problem: EllipticProblem, tree: DyadicTree, values: np.ndarray, owner: Optional[np.ndarray] = None,
              extend_outer: bool = True) -> np.ndarray:
    """Carrier values from atom values; outer-box carriers take the nearest atom's value or zero."""
    owner = attribute_to_atoms(problem, tree) if owner is None else owner
    data = np.zeros(len(owner))
    inner = owner >= 0
    data[inner] = values[owner[inner]]
    if extend_outer and np.any(~inner):
        nearest, _ = tree.locate(problem.carriers.point[~inner])
        data[~inner] = values[nearest]
    return data


@dataclass
class ExtensionStep:
    u: DiscreteField
    approximator: Approximator
    smooth: MollifiedApproximator
    trace: np.ndarray


@dataclass
class ExtensionSeries:
    """Per-iteration records of the halving loop and the partial sum Σ Φ_k."""
    top: int
    table: pd.DataFrame
    steps: List[ExtensionStep]
    total: np.ndarray
    residual: np.ndarray
    tail: float
    aborted: bool = False
    notes: List[str] = field(default_factory=list)

    @property
    def slack(self) -> float:
        return float(self.table["slack"].sum()) if not self.table.empty else 0.0


def iterate_extension(
    problem: EllipticProblem,
    builder: RegionBuilder,
    f0: np.ndarray,
    top: int,
    approximate: Callable[[DiscreteField], Approximator],
    iterations: int = DEFAULT_ITERATIONS,
    holder: Tuple[float, float] = (1.0, 1.0),
    centers: Sequence[Sequence[float]] = (),
    radii: Sequence[float] = (),
    owner: Optional[np.ndarray] = None
) -> ExtensionSeries:
    """
    The halving loop: u_k solves the problem with data f_k, Φ_k is a smoothed
    ½-approximator of u_k, φ_k its trace on the atoms of Q₀ and
    f_{k+1} = f_k - φ_k.

    Args:
        problem: Assembled problem.
        builder: Region builder.
        f0: Bounded data per atom.
        top: Q₀; traces are taken on its atoms.
        approximate: Builds the ½-approximator of a solution on T_{Q₀}.
        iterations: K ≤ 10.
        holder: Hölder constants (C, α) for the mollifier scale.
        centers: Ball centers for the per-step Carleson norm.
        radii: Ball radii for the per-step Carleson norm.
        owner: Carrier-to-atom map.

    Returns:
        The ExtensionSeries; the loop stops early when more than a tenth of
        the atoms have no trace or the data vanishes.
    """
    if not 1 <= iterations <= MAX_ITERATIONS:
        raise ParameterError(f"iterations must lie in [1, {MAX_ITERATIONS}]")
    tree = builder.tree
    owner = attribute_to_atoms(problem, tree) if owner is None else owner
    f = np.asarray(f0, dtype=float).copy()
    start, stop = int(tree.cubes.at[top, "start"]), int(tree.cubes.at[top, "stop"])
    norm0 = float(np.max(np.abs(f[start:stop]))) if stop > start else 0.0
    total = np.zeros(problem.grid.n_cells)
    steps: List[ExtensionStep] = []
    rows = []
    notes: List[str] = []
    aborted = False
    for k in range(iterations):
        started = time.perf_counter()
        size = float(np.max(np.abs(f[start:stop])))
        if size <= 1e-14 * max(norm0, 1.0):
            notes.append(f"data vanished after {k} iterations")
            break
        u = solve_dirichlet(problem, atom_data(problem, tree, f, owner), name=f"u_{k}")
        phi = approximate(u)
        smooth = mollify(phi, u.values, holder=holder)
        values = np.where(np.isfinite(smooth.values), smooth.values, 0.0)
        trace = trace_on_atoms(builder, smooth.values, top)
        excluded = int(trace.excluded.sum())
        if excluded > MAX_EXCLUDED * len(trace.atoms):
            notes.append(f"iteration {k}: {excluded} of {len(trace.atoms)} atoms have no trace")
            aborted = True
            break
        step_trace = np.where(trace.excluded, 0.0, trace.phi)
        f_next = f.copy()
        f_next[trace.atoms] -= step_trace
        size_next = float(np.max(np.abs(f_next[start:stop])))
        norm = carleson_l1_norm(problem.grid, smooth.values, centers, radii, mode="gradient").norm if len(centers) and len(radii) else float("nan")
        rows.append({
            "k": k, "f_sup": size, "f_next_sup": size_next, "u_sup": u.sup(),
            "phi_sup": float(np.max(np.abs(values))), "gap": smooth.gap, "carleson": norm,
            "excluded": excluded, "slack": max(0.0, size_next - 0.5 * size),
        })
        steps.append(ExtensionStep(u=u, approximator=phi, smooth=smooth, trace=step_trace))
        total += values
        f = f_next
        logger.info("extension step %d: sup f_k %.4g -> %.4g in %.2fs", k, size, size_next, time.perf_counter() - started)
    table = pd.DataFrame(rows, columns=["k", "f_sup", "f_next_sup", "u_sup", "phi_sup", "gap", "carleson", "excluded", "slack"])
    for note in notes:
        logger.warning(note)
    return ExtensionSeries(top=int(top), table=table, steps=steps, total=total, residual=f,
                           tail=2.0 ** -len(steps) * norm0, aborted=aborted, notes=notes)


@dataclass
class StepExtension:
    values: np.ndarray
    terms: pd.DataFrame
    carleson: float = float("nan")


def smoothed_box(builder: RegionBuilder, q: int) -> np.ndarray:
    """𝟙_{T_Q} averaged over windows of width ℓ(Q)/8 inside Ω."""
    grid = builder.grid
    cells = carleson_box(builder, q)
    indicator = np.zeros(grid.mask.shape)
    flat = np.zeros(grid.n_cells)
    flat[cells] = 1.0
    indicator[grid.mask] = flat
    width = max(1, int(round(float(builder.tree.cubes.at[q, "side"]) / 8 / grid.h))) | 1
    numerator = ndimage.uniform_filter(indicator, size=width, mode="constant")
    weight = ndimage.uniform_filter(grid.mask.astype(float), size=width, mode="constant")
    return (numerator / np.maximum(weight, 1e-300))[grid.mask]


def extend_step_part(
    builder: RegionBuilder,
    terms: pd.DataFrame,
    centers: Sequence[Sequence[float]] = (),
    radii: Sequence[float] = ()
) -> StepExtension:
    """G = Σ α_j ψ_j with ψ_j a smoothed indicator of the Carleson box of Q_j."""
    values = np.zeros(builder.grid.n_cells)
    for q, alpha in zip(terms["cube"], terms["alpha"]):
        values += alpha * smoothed_box(builder, int(q))
    carleson = float("nan")
    if len(centers) and len(radii):
        carleson = carleson_l1_norm(builder.grid, values, centers, radii, mode="gradient").norm
    return StepExtension(values=values, terms=terms.copy(), carleson=carleson)


@dataclass
class VaropoulosReport:
    values: np.ndarray
    bmo_norm: float
    gradient_bound: float
    trace_error: float
    carleson: float
    c1: float
    c2: float
    trace_table: pd.DataFrame


def assemble_and_verify(
    builder: RegionBuilder,
    series: ExtensionSeries,
    step: StepExtension,
    bmo: BmoFunction,
    points: Sequence[Sequence[float]],
    centers: Sequence[Sequence[float]],
    radii: Sequence[float]
) -> VaropoulosReport:
    """
    F = Σ Φ_k + G on T_{Q₀} and its three properties: |∇F|δ, the trace
    against f at sample points, and the L¹ Carleson norm, each divided by
    ‖f‖_BMO when that is positive.
    """
    grid = builder.grid
    box = carleson_box(builder, series.top)
    inside = np.zeros(grid.n_cells, dtype=bool)
    inside[box] = True
    values = np.where(inside, series.total + step.values, np.nan)
    resolved = np.ones(grid.n_cells, dtype=bool)
    for record in series.steps:
        resolved[record.smooth.under_resolved] = False
    gradient = grid.to_field(values, name="F").gradient_norm()
    good = inside & resolved
    gradient_bound = float(np.max(np.nan_to_num(gradient[good]) * grid.delta[good])) if np.any(good) else 0.0

    trace = nontangential_trace(builder, values, points, series.top)
    table = trace.table.copy()
    atoms, _ = builder.tree.locate(np.asarray(points, dtype=float))
    table["target"] = bmo.values[atoms]
    table["error"] = (table["phi"] - table["target"]).abs()
    trace_error = float(table["error"].max()) if not table.empty else 0.0
    carleson = carleson_l1_norm(grid, values, centers, radii, mode="gradient").norm if len(centers) and len(radii) else 0.0
    scale = bmo.norm if bmo.norm > 0 else 1.0
    report = VaropoulosReport(values=values, bmo_norm=bmo.norm, gradient_bound=gradient_bound, trace_error=trace_error,
                              carleson=carleson, c1=gradient_bound / scale, c2=carleson / scale, trace_table=table)
    logger.info("extension: sup|∇F|δ %.4g, trace error %.4g, Carleson %.4g (BMO %.4g)",
                gradient_bound, trace_error, carleson, bmo.norm)
    return report


def linearity_check(problem: EllipticProblem, f: np.ndarray, g: np.ndarray) -> float:
    """sup |u_{f+g} - u_f - u_g| for carrier data f and g."""
    u_f = solve_dirichlet(problem, f).values
    u_g = solve_dirichlet(problem, g).values
    u_sum = solve_dirichlet(problem, np.asarray(f) + np.asarray(g)).values
    return float(np.max(np.abs(u_sum - u_f - u_g))) if len(u_sum) else 0.0


def subadditivity_check(
    series: ExtensionSeries,
    grid: DomainGrid,
    centers: Sequence[Sequence[float]],
    radii: Sequence[float]
) -> Tuple[float, float]:
    """(Carleson norm of Σ Φ_k, Σ of the per-step norms)."""
    if not series.steps:
        return 0.0, 0.0
    parts = [carleson_l1_norm(grid, s.smooth.values, centers, radii, mode="gradient").norm for s in series.steps]
    defined = np.isfinite(series.steps[0].smooth.values)
    whole = carleson_l1_norm(grid, np.where(defined, series.total, np.nan), centers, radii, mode="gradient").norm
    return whole, float(sum(parts))
