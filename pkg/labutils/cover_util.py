import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd

from labutils.approx_util import Approximator, variation_density
from labutils.dyadic_util import DyadicTree
from labutils.elliptic_util import EllipticProblem, MeasureCache, TreeMeasure, attribute_to_atoms, solve_dirichlet
from labutils.error_util import ParameterError
from labutils.grid_util import DiscreteField
from labutils.whitney_util import RegionBuilder, cubes_containing, wide_cone

logger = logging.getLogger(__name__)

DEFAULT_ETA = 0.125


@dataclass
class GoodCover:
    """Nested cube unions 𝒪_1 ⊇ … ⊇ 𝒪_k over F with the ε₀ mass condition."""
    tree: DyadicTree
    top: int
    target: np.ndarray
    eps0: float
    alpha: float
    levels: List[np.ndarray]
    nested: bool = True
    disjoint: bool = True
    mass_condition: bool = True
    worst_ratio: float = 0.0
    notes: List[str] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.levels)

    @property
    def predicted_length(self) -> float:
        if self.alpha <= 0:
            return float("inf")
        return math.log(1 / self.alpha) / math.log(1 / self.eps0)

    @property
    def passed(self) -> bool:
        return self.nested and self.disjoint and self.mass_condition

    def level_atoms(self, level: int) -> np.ndarray:
        """Atom mask of 𝒪_level; level 0 is Q₀ itself."""
        cubes = [self.top] if level == 0 else self.levels[level - 1]
        return atom_mask(self.tree, cubes)


def atom_mask(tree: DyadicTree, cubes: Sequence[int]) -> np.ndarray:
    """Atoms lying in a union of cubes."""
    mask = np.zeros(len(tree.atoms), dtype=bool)
    starts = tree.cubes["start"].to_numpy()
    stops = tree.cubes["stop"].to_numpy()
    for q in cubes:
        mask[starts[q]:stops[q]] = True
    return mask


def _maximal_dense(tree: DyadicTree, piece: int, density: np.ndarray, threshold: float) -> List[int]:
    """Maximal cubes P ⊆ piece, P ≠ piece, with density ≥ threshold."""
    found = []
    stack = [int(c) for c in tree.children(piece)[::-1]]
    while stack:
        q = stack.pop()
        if density[q] >= threshold * (1 - 1e-12):
            found.append(q)
        else:
            stack.extend(int(c) for c in tree.children(q)[::-1])
    return found


def good_eps_cover(
    tree: DyadicTree,
    measure: TreeMeasure,
    top: int,
    target: Sequence[int],
    eps0: float,
    c_prime: float = 1.0,
    max_levels: Optional[int] = None
) -> GoodCover:
    """
    Build a good ε₀-cover of F (a union of cubes below Q₀) for ω by density
    thresholding, then check conditions (a), (b) and (c) directly.

    Inside every piece Q of level ℓ-1, level ℓ takes the maximal proper
    subcubes whose F-density ω(F∩P)/ω(P) reaches ω(F∩Q)/(ε₀ω(Q)); levels
    stop once that threshold exceeds one on a piece meeting F.

    Args:
        tree: Dyadic tree.
        measure: ω on the tree.
        top: Q₀.
        target: Cubes whose union is F.
        eps0: ε₀ in (0, 1/e).
        c_prime: Constant in the smallness condition α < ε₀²/C′.
        max_levels: Cap on k; defaults to the depth below Q₀.

    Returns:
        The GoodCover.

    Raises:
        ParameterError: If ε₀ ≥ 1/e, α is too large, or F leaves Q₀.
    """
    if not 0 < eps0 < 1 / math.e:
        raise ParameterError("ε₀ must lie in (0, 1/e)")
    target = np.asarray(sorted(int(f) for f in target), dtype=np.int64)
    for f in target:
        if not tree.contains(top, int(f)):
            raise ParameterError(f"cube {int(f)} of F is not inside Q₀={top}")
    f_atoms = atom_mask(tree, target)
    f_mass = tree.cube_masses(np.where(f_atoms, measure.atom_mass, 0.0))
    omega = measure.cube_mass
    if omega[top] <= 0:
        raise ParameterError(f"ω(Q₀) vanishes for cube {top}")
    alpha = float(f_mass[top] / omega[top])
    if alpha >= eps0 ** 2 / c_prime:
        raise ParameterError(f"α={alpha:.4g} is not below ε₀²/C′={eps0 ** 2 / c_prime:.4g}", {"alpha": alpha})
    density = np.divide(f_mass, omega, out=np.zeros_like(omega), where=omega > 0)
    depth = tree.max_depth - int(tree.cubes.at[top, "generation"])
    max_levels = depth if max_levels is None else max_levels
    levels: List[np.ndarray] = []
    pieces = [int(top)]
    notes = []
    while len(levels) < max_levels:
        meeting = [p for p in pieces if f_mass[p] > 0]
        if any(density[p] / eps0 > 1 + 1e-12 for p in meeting):
            break
        if any(len(tree.children(p)) == 0 for p in meeting):
            notes.append("tree depth exhausted before the density threshold")
            break
        nxt: List[int] = []
        for p in pieces:
            if f_mass[p] <= 0:
                continue
            nxt.extend(_maximal_dense(tree, p, density, density[p] / eps0))
        levels.append(np.array(sorted(nxt), dtype=np.int64))
        pieces = nxt
    cover = GoodCover(tree=tree, top=int(top), target=target, eps0=eps0, alpha=alpha, levels=levels, notes=notes)
    check_good_cover(cover, measure)
    logger.info("good cover with ε₀=%.3g, α=%.3g: k=%d (log ratio %.2f), conditions %s",
                eps0, alpha, cover.k, cover.predicted_length, "hold" if cover.passed else "fail")
    return cover


def check_good_cover(cover: GoodCover, measure: TreeMeasure) -> GoodCover:
    """Exhaustive check of (a) nesting over F, (b) disjointness and (c) the mass condition over all (i, ℓ)."""
    tree = cover.tree
    nested = True
    previous = cover.level_atoms(0)
    for level in range(1, cover.k + 1):
        current = cover.level_atoms(level)
        nested &= bool(np.all(previous[current]))
        previous = current
    if cover.k:
        nested &= bool(np.all(previous[atom_mask(tree, cover.target)]))
    disjoint = True
    for cubes in cover.levels:
        counts = np.zeros(len(tree.atoms), dtype=np.int64)
        for q in cubes:
            counts[tree.cubes.at[q, "start"]:tree.cubes.at[q, "stop"]] += 1
        disjoint &= bool(counts.max(initial=0) <= 1)
    worst = 0.0
    for level in range(2, cover.k + 1):
        inner = np.where(cover.level_atoms(level), measure.atom_mass, 0.0)
        inner_mass = tree.cube_masses(inner)
        for q in cover.levels[level - 2]:
            if measure.cube_mass[q] > 0:
                worst = max(worst, float(inner_mass[q] / measure.cube_mass[q]))
    cover.nested = nested
    cover.disjoint = disjoint
    cover.worst_ratio = worst
    cover.mass_condition = worst <= cover.eps0 * (1 + 1e-9)
    return cover


def tilde_cube(tree: DyadicTree, q: int, eta: float = DEFAULT_ETA) -> int:
    """Q̃: the cube of side ηℓ(Q) holding x_Q, or -1 below the tree depth."""
    steps = int(round(math.log(1 / eta, 2)))
    target = int(tree.cubes.at[q, "generation"]) + steps
    chain = cubes_containing(tree, tree.centers()[q], q)
    gens = tree.cubes["generation"].to_numpy()[chain]
    hit = chain[gens == target]
    return int(hit[0]) if len(hit) else -1


def descendant_at(tree: DyadicTree, q: int, point: Sequence[float], steps: int) -> int:
    """The cube holding `point` that lies `steps` generations below q, or -1."""
    chain = cubes_containing(tree, point, q)
    gens = tree.cubes["generation"].to_numpy()[chain]
    hit = chain[gens == int(tree.cubes.at[q, "generation"]) + steps]
    return int(hit[0]) if len(hit) else -1


def build_test_set(cover: GoodCover, eta: float = DEFAULT_ETA) -> np.ndarray:
    """Atom mask of S = ∪_{j≥2} Õ_{j-1} ∖ 𝒪_j."""
    tree = cover.tree
    mask = np.zeros(len(tree.atoms), dtype=bool)
    for j in range(2, cover.k + 1):
        tildes = [t for t in (tilde_cube(tree, int(q), eta) for q in cover.levels[j - 2]) if t >= 0]
        mask |= atom_mask(tree, tildes) & ~cover.level_atoms(j)
    return mask


@dataclass
class LowerBoundReport:
    """Oscillation pairs per level and cone integrals of |∇Φ|/δ at points of F."""
    cover: GoodCover
    oscillation: pd.DataFrame
    cones: pd.DataFrame
    c0: float
    notes: List[str] = field(default_factory=list)

    @property
    def every_level_oscillates(self) -> bool:
        """Some pair reaches c₀ on every tested level."""
        if self.oscillation.empty:
            return True
        best = self.oscillation.groupby("level")["osc"].max()
        return bool((best >= self.c0).all())

    @property
    def ratio(self) -> float:
        if self.cones.empty:
            return float("nan")
        return float(self.cones["ratio"].min())


def indicator_solution(problem: EllipticProblem, tree: DyadicTree, atoms: np.ndarray, owner: Optional[np.ndarray] = None) -> DiscreteField:
    """u(X) = ω^X(S) for an atom mask S."""
    owner = attribute_to_atoms(problem, tree) if owner is None else owner
    data = np.where(owner >= 0, atoms[np.maximum(owner, 0)].astype(float), 0.0)
    return solve_dirichlet(problem, data, name="u_S")


def converse_experiment(
    problem: EllipticProblem,
    builder: RegionBuilder,
    cache: MeasureCache,
    top: int,
    target: Sequence[int],
    eps0: float,
    approximate: Callable[[DiscreteField], Approximator],
    eta: float = DEFAULT_ETA,
    c0: float = 0.01,
    samples: int = 8,
    c_prime: float = 1.0
) -> LowerBoundReport:
    """
    Good cover of F, the test set S and u = ω^X(S), then the per-level
    oscillation between corkscrews of Q̃ and P̃, and the wide-cone integral of
    |∇Φ|/δ for a ½-approximator Φ of u at sampled points of F.

    Args:
        problem: Assembled problem.
        builder: Region builder.
        cache: ω rows.
        top: Q₀.
        target: Cubes whose union is F.
        eps0: ε₀.
        approximate: Builds the approximator of u on T_{Q₀}.
        eta: η.
        c0: Oscillation threshold reported against.
        samples: Number of points of F sampled.
        c_prime: C′ of the smallness condition.

    Returns:
        The LowerBoundReport.
    """
    tree = builder.tree
    grid = builder.grid
    corkscrews = builder.corkscrews
    pole = corkscrews.loc[top, ["X", "Y"]].to_numpy(dtype=float)
    measure = cache.row(pole)
    cover = good_eps_cover(tree, measure, top, target, eps0, c_prime=c_prime)
    s_mask = build_test_set(cover, eta)
    u = indicator_solution(problem, tree, s_mask, cache.owner)
    steps = int(round(math.log(1 / eta, 2)))
    notes: List[str] = []

    f_atoms = np.flatnonzero(atom_mask(tree, cover.target))
    picks = f_atoms[np.linspace(0, len(f_atoms) - 1, min(samples, len(f_atoms))).astype(np.int64)] if len(f_atoms) else f_atoms
    points = tree.atoms.centers[picks]

    def corkscrew_value(q: int) -> float:
        cell = int(corkscrews.at[q, "cell"])
        return float(u.values[cell]) if cell >= 0 else float("nan")

    rows = []
    for y in points:
        for level in range(1, cover.k):
            holding = [int(q) for q in cover.levels[level - 1] if _holds(tree, int(q), y)]
            if not holding:
                continue
            q = holding[0]
            p = descendant_at(tree, q, y, steps)
            q_tilde = tilde_cube(tree, q, eta)
            p_tilde = tilde_cube(tree, p, eta) if p >= 0 else -1
            if q_tilde < 0 or p_tilde < 0:
                notes.append(f"level {level} is below the tree depth at y=({y[0]:.4g}, {y[1]:.4g})")
                continue
            osc = abs(corkscrew_value(q_tilde) - corkscrew_value(p_tilde))
            rows.append({"y_x": y[0], "y_y": y[1], "level": level, "q": q, "p": p,
                         "q_tilde": q_tilde, "p_tilde": p_tilde, "osc": osc})
    oscillation = pd.DataFrame(rows, columns=["y_x", "y_y", "level", "q", "p", "q_tilde", "p_tilde", "osc"])
    oscillation = oscillation.dropna(subset=["osc"])

    phi = approximate(u)
    density = variation_density(grid, phi.values)
    weight = density / np.maximum(grid.delta, grid.h)
    log_alpha = math.log(1 / cover.alpha) if cover.alpha > 0 else float("inf")
    cone_rows = []
    for y in points:
        cells = wide_cone(builder, y, top, eta)
        integral = float(weight[cells].sum()) if len(cells) else 0.0
        cone_rows.append({"y_x": y[0], "y_y": y[1], "integral": integral, "ratio": integral / log_alpha})
    cones = pd.DataFrame(cone_rows, columns=["y_x", "y_y", "integral", "ratio"])
    for note in sorted(set(notes)):
        logger.warning(note)
    report = LowerBoundReport(cover=cover, oscillation=oscillation, cones=cones, c0=c0, notes=sorted(set(notes)))
    logger.info("converse experiment: k=%d, min level oscillation %.3g, min cone ratio %.3g",
                cover.k, oscillation.groupby("level")["osc"].max().min() if not oscillation.empty else float("nan"),
                report.ratio)
    return report


def _holds(tree: DyadicTree, q: int, point: np.ndarray) -> bool:
    atom, _ = tree.locate(point[None, :])
    return bool(tree.cubes.at[q, "start"] <= atom[0] < tree.cubes.at[q, "stop"])
