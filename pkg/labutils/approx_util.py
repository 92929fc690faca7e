import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from labutils.corona_util import (CoronaDecomposition, LabeledTree, SubRegime, corona_decompose, decompose_blue,
                                  label_cubes, measure_from_corkscrews)
from labutils.elliptic_util import MeasureCache
from labutils.error_util import ParameterError
from labutils.estimates_util import resolved_cubes
from labutils.grid_util import DiscreteField, DomainGrid
from labutils.whitney_util import RegionBuilder, carleson_box, cubes_containing

logger = logging.getLogger(__name__)

SMOOTHING_PASSES = 3
MIN_KERNEL_CELLS = 2


@dataclass
class Approximator:
    """
    A piecewise ε-approximator on the Carleson box T_{Q₀}.

    `values` and `region_of` hold one entry per Ω cell; cells outside T_{Q₀}
    carry NaN and -1.
    """
    grid: DomainGrid
    top: int
    eps: float
    cells: np.ndarray
    values: np.ndarray
    region_of: np.ndarray
    regions: pd.DataFrame
    gap: float
    notes: List[str] = field(default_factory=list)

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def pointwise(self) -> np.ndarray:
        """Cells where the approximator follows u itself (red regions)."""
        red = self.regions.loc[self.regions["kind"] == "V-red", "region"].to_numpy()
        return np.flatnonzero(np.isin(self.region_of, red))

    def to_field(self, name: str = "phi") -> DiscreteField:
        return self.grid.to_field(self.values, name=name, attrs={"top": int(self.top), "eps": float(self.eps)})


def corkscrew_values(builder: RegionBuilder, u: np.ndarray) -> np.ndarray:
    """u(X_Q) for every cube, NaN where X_Q is not in an Ω cell."""
    cells = builder.corkscrews["cell"].to_numpy()
    values = np.full(len(cells), np.nan)
    values[cells >= 0] = np.asarray(u, dtype=float)[cells[cells >= 0]]
    return values


def _subregime_index(n: int, subregimes: Sequence[SubRegime]) -> np.ndarray:
    index = np.full(n, -1, dtype=np.int64)
    for k, sub in enumerate(subregimes):
        index[sub.members] = k
    return index


def _representative_cell(builder: RegionBuilder, q: int) -> int:
    """Cell at the center of the largest Whitney square of U_Q, else the corkscrew cell."""
    members = builder.region_members(q, "plain")
    squares = builder.complex.squares
    if len(members):
        sides = squares["side"].to_numpy()[members]
        best = members[np.lexsort((members, -sides))[0]]
        row = squares.loc[best]
        cell = int(builder.grid.locate(np.array([row["x0"] + row["side"] / 2, row["y0"] + row["side"] / 2]))[0])
        if cell >= 0:
            return cell
    return int(builder.corkscrews.at[q, "cell"])


def build_bv_approximator(
    builder: RegionBuilder,
    u: np.ndarray,
    top: int,
    eps: float,
    decomposition: CoronaDecomposition,
    labels: LabeledTree,
    subregimes: Sequence[SubRegime]
) -> Approximator:
    """
    The piecewise approximator Φ_{Q₀} of u on T_{Q₀}.

    Good blue cubes are taken largest first (ties by index); each one claims
    the sawtooth of its subregime below it with the value u at the
    subregime's corkscrew. The remaining red and bad blue cubes are walked
    generation by generation and claim what is left of their Whitney regions:
    red regions copy u, bad blue regions take u at the center of their largest
    Whitney square.

    Args:
        builder: Region builder.
        u: Solution values on the Ω cells.
        top: Q₀.
        eps: ε.
        decomposition: Corona decomposition of the tree.
        labels: Red/blue colors.
        subregimes: Blue subregimes of every regime.

    Returns:
        The Approximator.
    """
    started = time.perf_counter()
    tree = builder.tree
    grid = builder.grid
    u = np.asarray(u, dtype=float)
    values_at = corkscrew_values(builder, u)
    n_cubes = len(tree.cubes)
    sub_of = _subregime_index(n_cubes, subregimes)
    color = labels.color
    cubes = tree.descendants(top)
    covered = np.zeros(n_cubes, dtype=bool)
    region_of = np.full(grid.n_cells, -1, dtype=np.int64)
    values = np.full(grid.n_cells, np.nan)
    rows = []

    def claim(cells: np.ndarray) -> np.ndarray:
        return cells[region_of[cells] < 0]

    for q in cubes:
        if covered[q] or color[q] != "blue" or decomposition.regime_of[q] < 0 or sub_of[q] < 0:
            continue
        sub = subregimes[sub_of[q]]
        below = np.intersect1d(sub.members, tree.descendants(int(q)))
        covered[below] = True
        cells = claim(builder.union_cells(below, "plain"))
        value = float(values_at[sub.top])
        region = len(rows)
        region_of[cells] = region
        values[cells] = value
        rows.append({"region": region, "kind": "A", "cube": int(q), "value": value, "cells": len(cells)})

    unresolved = 0
    for q in cubes:
        if covered[q]:
            continue
        if color[q] == "unresolved":
            unresolved += 1
        cells = claim(builder.cells(int(q), "plain"))
        region = len(rows)
        region_of[cells] = region
        if color[q] == "blue":
            value = float(u[_representative_cell(builder, int(q))])
            values[cells] = value
            rows.append({"region": region, "kind": "V-blue", "cube": int(q), "value": value, "cells": len(cells)})
        else:
            values[cells] = u[cells]
            rows.append({"region": region, "kind": "V-red", "cube": int(q), "value": float("nan"), "cells": len(cells)})

    box = carleson_box(builder, top)
    notes = []
    missing = int(np.sum(region_of[box] < 0))
    if missing:
        notes.append(f"{missing} cells of the Carleson box were left unassigned")
    if unresolved:
        resolved = cubes[color[cubes] != "unresolved"]
        last = int(tree.cubes["generation"].to_numpy()[resolved].max()) if len(resolved) else -1
        notes.append(f"{unresolved} cubes are below the grid resolution; construction stops at generation {last}")
    scale = max(float(np.max(np.abs(u))) if len(u) else 0.0, 1e-300)
    gap = float(np.max(np.abs(u[box] - values[box]))) / scale if len(box) else 0.0
    regions = pd.DataFrame(rows, columns=["region", "kind", "cube", "value", "cells"])
    approximator = Approximator(grid=grid, top=int(top), eps=eps, cells=box, values=values, region_of=region_of,
                                regions=regions, gap=gap, notes=notes)
    for note in notes:
        logger.warning(note)
    logger.info("approximator on cube %d: %d regions, gap %.4g (ε=%.3g) in %.2fs",
                top, len(regions), gap, eps, time.perf_counter() - started)
    return approximator


@dataclass
class ApproximationRun:
    decomposition: CoronaDecomposition
    labels: LabeledTree
    subregimes: List[SubRegime]
    approximator: Approximator


def approximate(
    builder: RegionBuilder,
    cache: MeasureCache,
    u: DiscreteField,
    top: int,
    eps: float,
    m: float = 4.0
) -> ApproximationRun:
    """
    Corona decomposition, coloring, blue subregimes and Φ_{Q₀} for one solution.

    Colors and stopping thresholds are relative to sup |u|.
    """
    decomposition = corona_decompose(builder.tree, measure_from_corkscrews(cache, builder.corkscrews), m=m)
    scale = max(u.sup(), 1e-300)
    labels = label_cubes(builder, u.values / scale, eps, decomposition, gradient=u.gradient_norm() / scale)
    values_at = corkscrew_values(builder, u.values / scale)
    subregimes: List[SubRegime] = []
    for regime in decomposition.regimes:
        subregimes.extend(decompose_blue(builder, regime, labels, values_at, eps))
    approximator = build_bv_approximator(builder, u.values, top, eps, decomposition, labels, subregimes)
    return ApproximationRun(decomposition=decomposition, labels=labels, subregimes=subregimes, approximator=approximator)


def grid_faces(grid: DomainGrid) -> Tuple[np.ndarray, np.ndarray]:
    """Pairs of horizontally or vertically adjacent Ω cells."""
    index = grid.cell_index
    pairs = []
    for a, b in ((index[:, :-1], index[:, 1:]), (index[:-1, :], index[1:, :])):
        keep = (a >= 0) & (b >= 0)
        pairs.append(np.column_stack([a[keep], b[keep]]))
    faces = np.vstack(pairs)
    return faces[:, 0], faces[:, 1]


@dataclass
class CarlesonReport:
    """sup over sampled (x, r) of r⁻¹ times the variation of a field in B(x, r) ∩ Ω."""
    norm: float
    worst: Tuple[float, float, float]
    table: pd.DataFrame
    jump: float = 0.0
    interior: float = 0.0


def carleson_l1_norm(
    grid: DomainGrid,
    values: np.ndarray,
    centers: Sequence[Sequence[float]],
    radii: Sequence[float],
    mode: str = "variation",
    region_of: Optional[np.ndarray] = None
) -> CarlesonReport:
    """
    L¹ Carleson norm of a grid function over sampled boundary balls.

    In "variation" mode every face between two defined cells inside the ball
    adds |jump|·h, which is the total variation of a piecewise constant
    field; with `region_of` the worst ball is split into jumps across region
    interfaces and variation inside regions. In "gradient" mode |∇Φ|h² is
    summed over the cells in the ball.
    """
    if mode not in ("variation", "gradient"):
        raise ParameterError(f"unknown mode {mode!r}")
    values = np.asarray(values, dtype=float)
    cells = grid.centers
    h = grid.h
    if mode == "variation":
        p, q = grid_faces(grid)
        ok = np.isfinite(values[p]) & np.isfinite(values[q])
        p, q = p[ok], q[ok]
        mass = np.abs(values[p] - values[q]) * h
    else:
        gradient = grid.to_field(values, name="phi").gradient_norm()
        density = np.where(np.isfinite(values), gradient * h ** 2, 0.0)
    rows = []
    best, worst, split = -1.0, (float("nan"),) * 3, (0.0, 0.0)
    for x, y in centers:
        d = np.hypot(cells[:, 0] - x, cells[:, 1] - y)
        for r in radii:
            inside = d < r
            if mode == "variation":
                faces = inside[p] & inside[q]
                total = float(mass[faces].sum())
            else:
                total = float(density[inside].sum())
            ratio = total / r
            rows.append({"x": float(x), "y": float(y), "r": float(r), "value": ratio})
            if ratio > best:
                best, worst = ratio, (float(x), float(y), float(r))
                if mode == "variation" and region_of is not None:
                    across = region_of[p] != region_of[q]
                    split = (float(mass[faces & across].sum()) / r, float(mass[faces & ~across].sum()) / r)
    table = pd.DataFrame(rows, columns=["x", "y", "r", "value"])
    return CarlesonReport(norm=max(best, 0.0), worst=worst, table=table, jump=split[0], interior=split[1])


def total_variation_oracle(grid: DomainGrid, values: np.ndarray) -> float:
    """Total variation by walking every cell and its right and upper neighbors."""
    data = grid.to_field(np.asarray(values, dtype=float), name="phi").array.to_numpy()
    total = 0.0
    ny, nx = data.shape
    for j in range(ny):
        for i in range(nx):
            here = data[j, i]
            if not np.isfinite(here):
                continue
            if i + 1 < nx and np.isfinite(data[j, i + 1]):
                total += abs(data[j, i + 1] - here) * grid.h
            if j + 1 < ny and np.isfinite(data[j + 1, i]):
                total += abs(data[j + 1, i] - here) * grid.h
    return total


@dataclass
class RegularizedDistance:
    """β ≈ δ on the Ω cells with c1 δ ≤ β ≤ c2 δ."""
    beta: np.ndarray
    c1: float
    c2: float


def regularized_distance(grid: DomainGrid, passes: int = SMOOTHING_PASSES) -> RegularizedDistance:
    """
    Smooth δ by repeated box averaging over a window of width δ/4 around each
    cell, then clamp to [δ/2, 2δ].
    """
    delta = grid.delta
    mask = grid.mask
    widths = np.maximum(1, np.round(delta / (4 * grid.h))).astype(np.int64) | 1
    current = np.zeros(mask.shape)
    current[mask] = delta
    for _ in range(passes):
        smoothed = np.array(delta, dtype=float)
        for width in np.unique(widths):
            numerator = ndimage.uniform_filter(current * mask, size=int(width), mode="constant")
            weight = ndimage.uniform_filter(mask.astype(float), size=int(width), mode="constant")
            pick = widths == width
            smoothed[pick] = (numerator / np.maximum(weight, 1e-300))[mask][pick]
        current = np.zeros(mask.shape)
        current[mask] = smoothed
    beta = np.clip(current[mask], delta / 2, 2 * delta)
    ratio = beta / delta
    return RegularizedDistance(beta=beta, c1=float(ratio.min()), c2=float(ratio.max()))


def _bump(k: int) -> np.ndarray:
    offsets = np.arange(-k, k + 1)
    z2 = (offsets[None, :] ** 2 + offsets[:, None] ** 2) / float(k * k)
    kernel = np.where(z2 < 1, np.exp(-1.0 / np.maximum(1 - z2, 1e-12)), 0.0)
    return kernel / kernel.sum()


@dataclass
class MollifiedApproximator:
    values: np.ndarray
    xi: float
    beta: RegularizedDistance
    under_resolved: np.ndarray
    gap: float
    gradient_bound: float
    lipschitz_bound: float


def holder_xi(eps: float, c_holder: float, alpha: float) -> float:
    """ξ_ε = ½(ε/C)^{1/α}."""
    if c_holder <= 0 or not 0 < alpha <= 1:
        raise ParameterError("need C > 0 and 0 < α ≤ 1")
    return 0.5 * (eps / c_holder) ** (1.0 / alpha)


def mollify(
    approximator: Approximator,
    u: np.ndarray,
    xi: Optional[float] = None,
    holder: Tuple[float, float] = (1.0, 1.0),
    beta: Optional[RegularizedDistance] = None
) -> MollifiedApproximator:
    """
    Φ(X) = ∬ ζ_{ξβ(X)/4}(X - Y) Φ₀(Y) dY with a smooth bump ζ.

    The kernel radius never exceeds ξδ(X)/2. Cells where it is below two grid
    cells keep Φ₀ and are reported as under-resolved; they are left out of
    the gradient and Lipschitz bounds.

    Args:
        approximator: Φ₀.
        u: The approximated solution on the Ω cells.
        xi: ξ_ε; defaults to the Hölder choice and is capped by it.
        holder: Measured Hölder constants (C, α).
        beta: Precomputed regularized distance.

    Returns:
        The MollifiedApproximator.
    """
    grid = approximator.grid
    eps = approximator.eps
    bound = holder_xi(eps, *holder)
    xi = bound if xi is None else min(xi, bound)
    beta = beta if beta is not None else regularized_distance(grid)
    radius = xi * beta.beta / 4
    stencil = np.floor(radius / grid.h).astype(np.int64)
    source = approximator.values
    defined = np.isfinite(source)
    filled = np.zeros(grid.mask.shape)
    weights = np.zeros(grid.mask.shape)
    filled[grid.mask] = np.where(defined, source, 0.0)
    weights[grid.mask] = defined.astype(float)
    result = source.copy()
    under = defined & (stencil < MIN_KERNEL_CELLS)
    for k in np.unique(stencil[defined & ~under]):
        kernel = _bump(int(k))
        numerator = ndimage.convolve(filled, kernel, mode="constant")[grid.mask]
        denominator = ndimage.convolve(weights, kernel, mode="constant")[grid.mask]
        pick = defined & (stencil == k)
        result[pick] = numerator[pick] / np.maximum(denominator[pick], 1e-300)

    u = np.asarray(u, dtype=float)
    scale = max(float(np.max(np.abs(u))) if len(u) else 0.0, 1e-300)
    gap = float(np.max(np.abs(u[defined] - result[defined]))) / scale if np.any(defined) else 0.0
    field_ = grid.to_field(result, name="phi_smooth")
    gradient = field_.gradient_norm()
    good = defined & ~under
    gradient_bound = float(np.max(np.nan_to_num(gradient[good]) * grid.delta[good])) if np.any(good) else 0.0
    p, q = grid_faces(grid)
    pair = good[p] & good[q]
    lipschitz = np.abs(result[p] - result[q]) * grid.delta[p] / grid.h
    lipschitz_bound = float(np.max(lipschitz[pair])) if np.any(pair) else 0.0
    if np.any(under):
        logger.warning("%d cells have a kernel below %d grid cells", int(under.sum()), MIN_KERNEL_CELLS)
    logger.info("mollified with ξ=%.4g: gap %.4g, sup|∇Φ|δ %.4g", xi, gap, gradient_bound)
    return MollifiedApproximator(values=result, xi=xi, beta=beta, under_resolved=np.flatnonzero(under), gap=gap,
                                 gradient_bound=gradient_bound, lipschitz_bound=lipschitz_bound)


@dataclass
class TraceReport:
    table: pd.DataFrame
    tolerance: float

    @property
    def phi(self) -> np.ndarray:
        return self.table["phi"].to_numpy()

    @property
    def cauchy(self) -> np.ndarray:
        return self.table["cauchy"].to_numpy()


def nontangential_trace(
    builder: RegionBuilder,
    values: np.ndarray,
    points: Sequence[Sequence[float]],
    top: int,
    tolerance: float = 0.05
) -> TraceReport:
    """
    Mean of a field over U_Q for the resolved cubes Q ∋ x, coarse to fine; φ(x)
    is the deepest value, and the trace is flagged Cauchy when the last two
    levels differ by less than the tolerance.
    """
    values = np.asarray(values, dtype=float)
    resolved = set(resolved_cubes(builder).tolist())
    gens = builder.tree.cubes["generation"].to_numpy()
    rows = []
    for x in points:
        x = np.asarray(x, dtype=float)
        levels = []
        for q in cubes_containing(builder.tree, x, top):
            cells = builder.cells(int(q))
            cells = cells[np.isfinite(values[cells])]
            if int(q) in resolved and len(cells):
                levels.append((int(gens[q]), float(values[cells].mean())))
        phi = levels[-1][1] if levels else float("nan")
        previous = levels[-2][1] if len(levels) > 1 else float("nan")
        rows.append({
            "x": x[0], "y": x[1], "phi": phi, "previous": previous,
            "generation": levels[-1][0] if levels else -1, "levels": len(levels),
            "cauchy": bool(len(levels) > 1 and abs(phi - previous) < tolerance), "empty": len(levels) < 2,
        })
    table = pd.DataFrame(rows, columns=["x", "y", "phi", "previous", "generation", "levels", "cauchy", "empty"])
    if table["empty"].any():
        logger.warning("%d boundary points have fewer than two resolved cone levels", int(table["empty"].sum()))
    return TraceReport(table=table, tolerance=tolerance)


@dataclass
class GlobalApproximator:
    values: np.ndarray
    chain: List[int]
    gap: float
    outside: int


def global_approximator(
    builder: RegionBuilder,
    u: np.ndarray,
    local: Callable[[int], Approximator],
    point: Sequence[float],
    start_generation: int
) -> GlobalApproximator:
    """
    Φ = 𝟙_{T_{P₁}}Φ_{P₁} + Σ_k 𝟙_{T_{P_k} ∖ T_{P_{k-1}}}Φ_{P_k} along the chain of
    cubes P₁ ⊂ P₂ ⊂ … holding `point`, from `start_generation` up to the root.
    Cells outside every T_{P_k} keep u.
    """
    tree = builder.tree
    chain = [int(q) for q in cubes_containing(tree, point)[::-1] if tree.cubes.at[q, "generation"] <= start_generation]
    if not chain:
        raise ParameterError(f"no cube at generation ≤ {start_generation} holds the point")
    u = np.asarray(u, dtype=float)
    values = np.full(len(u), np.nan)
    for q in chain:
        piece = local(q)
        fresh = np.isnan(values) & np.isfinite(piece.values)
        values[fresh] = piece.values[fresh]
    outside = np.isnan(values)
    values[outside] = u[outside]
    scale = max(float(np.max(np.abs(u))) if len(u) else 0.0, 1e-300)
    gap = float(np.max(np.abs(values - u))) / scale if len(u) else 0.0
    logger.info("global approximator over %d nested cubes: gap %.4g, %d cells outside the boxes",
                len(chain), gap, int(outside.sum()))
    return GlobalApproximator(values=values, chain=chain, gap=gap, outside=int(outside.sum()))


def variation_density(grid: DomainGrid, values: np.ndarray) -> np.ndarray:
    """Per-cell share of the face variation: each face gives half of |jump|·h to both sides."""
    values = np.asarray(values, dtype=float)
    p, q = grid_faces(grid)
    ok = np.isfinite(values[p]) & np.isfinite(values[q])
    mass = np.abs(values[p[ok]] - values[q[ok]]) * grid.h / 2
    return np.bincount(p[ok], weights=mass, minlength=grid.n_cells) + np.bincount(q[ok], weights=mass, minlength=grid.n_cells)


def approximator_summary(approximator: Approximator, carleson: Optional[CarlesonReport] = None) -> Dict[str, float]:
    summary = {"top": approximator.top, "eps": approximator.eps, "gap": approximator.gap, "regions": approximator.n_regions}
    if carleson is not None:
        summary.update({"carleson": carleson.norm, "jump": carleson.jump, "interior": carleson.interior})
    return summary


@dataclass
class AtomTrace:
    """Trace of a field on the atoms of Q₀ read at the deepest resolved cube over each atom."""
    atoms: np.ndarray
    phi: np.ndarray
    previous: np.ndarray
    levels: np.ndarray

    @property
    def excluded(self) -> np.ndarray:
        return ~np.isfinite(self.phi)


def trace_on_atoms(builder: RegionBuilder, values: np.ndarray, top: int) -> AtomTrace:
    """Vectorized trace over every atom of Q₀ from per-cube means over U_Q."""
    tree = builder.tree
    values = np.asarray(values, dtype=float)
    cubes = tree.descendants(top)
    means = np.full(len(tree.cubes), np.nan)
    for q in resolved_cubes(builder, cubes):
        cells = builder.cells(int(q))
        cells = cells[np.isfinite(values[cells])]
        if len(cells):
            means[q] = float(values[cells].mean())
    start, stop = int(tree.cubes.at[top, "start"]), int(tree.cubes.at[top, "stop"])
    atoms = np.arange(start, stop)
    phi = np.full(len(atoms), np.nan)
    previous = np.full(len(atoms), np.nan)
    levels = np.zeros(len(atoms), dtype=np.int64)
    for g in range(int(tree.cubes.at[top, "generation"]), tree.max_depth + 1):
        if len(tree.generation(g)) == 0:
            break
        level = means[tree.cube_of_atom(g, atoms)]
        hit = np.isfinite(level)
        previous[hit] = phi[hit]
        phi[hit] = level[hit]
        levels[hit] += 1
    return AtomTrace(atoms=atoms, phi=phi, previous=previous, levels=levels)
