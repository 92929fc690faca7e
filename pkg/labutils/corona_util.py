import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from labutils.dyadic_util import DyadicTree
from labutils.elliptic_util import EllipticProblem, MeasureCache, TreeMeasure
from labutils.error_util import GeometryError, ParameterError
from labutils.estimates_util import green_energy_identity
from labutils.whitney_util import RegionBuilder, sawtooth_members, segment_point

logger = logging.getLogger(__name__)

S_GRID = tuple(np.round(np.arange(0.05, 1.0001, 0.05), 2))
MASS_FLOOR = 1e-12
DEFAULT_LAMBDA = 0.01
RED_FRACTION = 1.0 / 1000
STOP_FRACTION = 1.0 / 100
SAWTOOTH_FRACTION = 1.0 / 50
TYPES = ("T1", "T2", "T3", "T4")


@dataclass
class AInftyFit:
    """
    Constants of ω^Y(A) ≤ C (σ(A)/σ(Δ))^s ω^Y(Δ) over sampled triples.

    `curve` maps every s on the grid to its smallest admissible C; (c, s) is
    the largest s whose C stays under the cap.
    """
    c: float
    s: float
    curve: pd.DataFrame
    triples: int
    skipped: int
    worst: Optional[Tuple[int, int, int]] = None

    def c_at(self, s: float) -> float:
        row = self.curve.loc[np.isclose(self.curve["s"], s)]
        if row.empty:
            raise ParameterError(f"s={s} is not on the fitted grid")
        return float(row["c"].iloc[0])


def fit_a_infty(
    rows: Sequence[TreeMeasure],
    cubes: Optional[Sequence[int]] = None,
    generations_below: int = 3,
    s_grid: Sequence[float] = S_GRID,
    c_cap: float = 10.0
) -> AInftyFit:
    """
    Fit the A∞ constants from ω rows.

    Each sampled cube Δ is tested against its descendants A down to
    `generations_below` generations, for every row whose pole lies outside
    4B(x_Δ, outer radius).

    Args:
        rows: ω rows with poles.
        cubes: Cubes used as Δ; defaults to all cubes with children.
        generations_below: Depth of the subsets A below Δ.
        s_grid: Exponents swept.
        c_cap: Cap deciding the headline (C, s).

    Returns:
        The AInftyFit.
    """
    if not rows:
        raise ParameterError("need at least one ω row")
    tree = rows[0].tree
    frame = tree.cubes
    sigma = frame["sigma"].to_numpy()
    outer = frame["outer"].to_numpy()
    centers = tree.centers()
    gens = frame["generation"].to_numpy()
    cubes = np.flatnonzero(frame["n_children"].to_numpy() > 0) if cubes is None else np.asarray(cubes, dtype=np.int64)
    omega_ratio, sigma_ratio, labels = [], [], []
    skipped = 0
    for k, row in enumerate(rows):
        pole = np.asarray(row.pole, dtype=float)
        for q in cubes:
            if np.hypot(*(pole - centers[q])) < 4 * outer[q]:
                continue
            if row.cube_mass[q] <= 0:
                skipped += 1
                continue
            subsets = tree.descendants(int(q), include_self=False, max_generation=int(gens[q]) + generations_below)
            omega_ratio.append(row.cube_mass[subsets] / row.cube_mass[q])
            sigma_ratio.append(sigma[subsets] / sigma[q])
            labels.append(np.column_stack([np.full(len(subsets), k), np.full(len(subsets), q), subsets]))
    if skipped:
        logger.warning("A∞ fit skipped %d triples with ω^Y(Δ)=0", skipped)
    if not omega_ratio:
        curve = pd.DataFrame({"s": list(s_grid), "c": [float("nan")] * len(s_grid)})
        return AInftyFit(c=float("nan"), s=float("nan"), curve=curve, triples=0, skipped=skipped)
    w = np.concatenate(omega_ratio)
    sg = np.concatenate(sigma_ratio)
    lab = np.concatenate(labels)
    keep = sg > 0
    w, sg, lab = w[keep], sg[keep], lab[keep]
    constants = []
    for s in s_grid:
        ratio = w / sg ** s
        constants.append(max(float(ratio.max()), 0.0))
    curve = pd.DataFrame({"s": list(s_grid), "c": constants})
    admissible = curve.loc[curve["c"] <= c_cap]
    chosen = admissible.iloc[-1] if not admissible.empty else curve.iloc[0]
    worst_index = int(np.argmax(w / sg ** chosen["s"]))
    worst = tuple(int(v) for v in lab[worst_index])
    fit = AInftyFit(c=float(chosen["c"]), s=float(chosen["s"]), curve=curve, triples=int(len(w)), skipped=skipped, worst=worst)
    logger.info("A∞ fit over %d triples: C=%.4g at s=%.2f", fit.triples, fit.c, fit.s)
    return fit


def dyadic_a_infty_curve(row: TreeMeasure, top: int, generation: int, alphas: Sequence[float]) -> pd.DataFrame:
    """
    Empirical α → β map: the largest σ(F)/σ(Q₀) over unions F of cubes of
    the given generation below Q₀ with ω(F)/ω(Q₀) ≤ α.

    Cubes taken in increasing ω/σ density give the extremal unions exactly.
    """
    tree = row.tree
    cubes = tree.descendants(top)
    cubes = cubes[tree.cubes["generation"].to_numpy()[cubes] == generation]
    if len(cubes) == 0:
        raise ParameterError(f"cube {top} has no descendants at generation {generation}")
    sigma = tree.cubes["sigma"].to_numpy()[cubes]
    omega = row.cube_mass[cubes]
    order = np.lexsort((cubes, omega / sigma))
    w = np.concatenate([[0.0], np.cumsum(omega[order])]) / max(row.cube_mass[top], 1e-300)
    s = np.concatenate([[0.0], np.cumsum(sigma[order])]) / tree.cubes.at[top, "sigma"]
    betas = [float(s[np.searchsorted(w, alpha * (1 + 1e-12), side="right") - 1]) for alpha in alphas]
    return pd.DataFrame({"alpha": list(alphas), "beta": betas})


def carleson_packing_norm(tree: DyadicTree, collection: Iterable[int]) -> Tuple[float, int]:
    """
    Exact sup over top cubes of Σ_{Q ∈ 𝒜, Q ⊆ Q₀} σ(Q) / σ(Q₀) in one bottom-up pass.

    Returns:
        Tuple of the norm and the worst top cube (-1 for an empty collection).
    """
    frame = tree.cubes
    sigma = frame["sigma"].to_numpy()
    parent = frame["parent"].to_numpy()
    gens = frame["generation"].to_numpy()
    totals = np.zeros(len(frame))
    members = np.asarray(list(collection), dtype=np.int64)
    if len(members) == 0:
        return 0.0, -1
    totals[members] += sigma[members]
    for g in range(int(gens.max()), 0, -1):
        level = np.flatnonzero(gens == g)
        np.add.at(totals, parent[level], totals[level])
    ratio = np.where(sigma > 0, totals / np.where(sigma > 0, sigma, 1.0), 0.0)
    worst = int(np.argmax(ratio))
    return float(ratio[worst]), worst


def brute_force_packing_norm(tree: DyadicTree, collection: Iterable[int]) -> float:
    """Per-top-cube summation; quadratic, for small trees only."""
    members = np.asarray(list(collection), dtype=np.int64)
    if len(members) == 0:
        return 0.0
    sigma = tree.cubes["sigma"].to_numpy()
    best = 0.0
    for top in range(len(tree.cubes)):
        inside = [m for m in members if tree.contains(top, int(m))]
        if sigma[top] > 0:
            best = max(best, float(sigma[inside].sum()) / sigma[top])
    return best


@dataclass
class CoherenceReport:
    maximal: bool
    closed: bool
    children: bool

    @property
    def passed(self) -> bool:
        return self.maximal and self.closed and self.children


def check_coherence(tree: DyadicTree, members: Iterable[int], top: int) -> CoherenceReport:
    """Conditions (a) maximal element, (b) closed between member and top, (c) children all or none."""
    members = set(int(m) for m in members)
    maximal = top in members and all(tree.contains(top, m) for m in members)
    closed = True
    children_rule = True
    for m in members:
        for a in tree.ancestors(m):
            if a == top:
                break
            if a not in members:
                closed = False
        kids = tree.children(m)
        if len(kids):
            inside = [int(c) in members for c in kids]
            if any(inside) and not all(inside):
                children_rule = False
    return CoherenceReport(maximal=maximal, closed=closed, children=children_rule)


@dataclass
class Regime:
    top: int
    members: np.ndarray
    band: float


@dataclass
class CoronaDecomposition:
    tree: DyadicTree
    regimes: List[Regime]
    regime_of: np.ndarray
    bad: np.ndarray
    m: float
    packing: float = 0.0
    worst_top: int = -1

    @property
    def tops(self) -> np.ndarray:
        return np.array([r.top for r in self.regimes], dtype=np.int64)

    @property
    def good(self) -> np.ndarray:
        return np.flatnonzero(self.regime_of >= 0)

    def yellow(self) -> np.ndarray:
        """Cubes of a regime with a child outside that regime."""
        frame = self.tree.cubes
        first = frame["first_child"].to_numpy()
        count = frame["n_children"].to_numpy()
        flags = np.zeros(len(frame), dtype=bool)
        for q in self.good:
            if count[q] == 0:
                continue
            kids = np.arange(first[q], first[q] + count[q])
            flags[q] = np.any(self.regime_of[kids] != self.regime_of[q])
        return flags


def measure_from_corkscrews(cache: MeasureCache, corkscrews: pd.DataFrame) -> Callable[[int], Optional[TreeMeasure]]:
    """ω^{X_Q} rows for the corona; None where X_Q is not an interior Ω cell."""
    def measure(q: int) -> Optional[TreeMeasure]:
        if corkscrews.at[q, "cell"] < 0 or corkscrews.at[q, "gamma"] <= 0:
            return None
        try:
            return cache.row(corkscrews.loc[q, ["X", "Y"]].to_numpy(dtype=float))
        except ParameterError:
            return None
    return measure


def corona_decompose(
    tree: DyadicTree,
    measure_for: Callable[[int], Optional[TreeMeasure]],
    m: float = 4.0,
    mass_floor: float = MASS_FLOOR
) -> CoronaDecomposition:
    """
    Greedy top-down stopping time on ω^{X_{Q(𝒮)}}/σ.

    A regime starts at the largest unassigned cube (ties by index) and grows
    through cubes whose normalized density ratio stays in [1/M, M]; a cube
    joins its parent's regime together with all its siblings or not at all.
    Cubes with no usable ω row, or whose whole subtree falls below the mass
    floor, go to ℬ.
    """
    if m <= 1:
        raise ParameterError("M must exceed 1")
    started = time.perf_counter()
    frame = tree.cubes
    sigma = frame["sigma"].to_numpy()
    first = frame["first_child"].to_numpy()
    count = frame["n_children"].to_numpy()
    regime_of = np.full(len(frame), -1, dtype=np.int64)
    bad = np.zeros(len(frame), dtype=bool)
    regimes: List[Regime] = []
    for top in range(len(frame)):
        if regime_of[top] >= 0 or bad[top]:
            continue
        row = measure_for(top)
        if row is None or row.cube_mass[top] <= mass_floor:
            bad[top] = True
            if row is not None:
                logger.warning("ω mass of cube %d is below the floor; subtree goes to the bad set", top)
                bad[tree.descendants(top)] = True
            continue
        omega = row.cube_mass
        index = len(regimes)
        members = [top]
        regime_of[top] = index
        band = 1.0
        stack = [top]
        while stack:
            q = stack.pop()
            if count[q] == 0:
                continue
            kids = np.arange(first[q], first[q] + count[q])
            ratio = (omega[kids] / omega[top]) / (sigma[kids] / sigma[top])
            usable = omega[kids] > mass_floor * omega[top]
            if np.all(usable & (ratio >= 1.0 / m) & (ratio <= m)):
                regime_of[kids] = index
                members.extend(int(k) for k in kids)
                band = max(band, float(np.max(np.maximum(ratio, 1.0 / ratio))))
                stack.extend(int(k) for k in kids[::-1])
        regimes.append(Regime(top=top, members=np.sort(np.array(members, dtype=np.int64)), band=band))
    decomposition = CoronaDecomposition(tree=tree, regimes=regimes, regime_of=regime_of, bad=np.flatnonzero(bad), m=m)
    decomposition.packing, decomposition.worst_top = carleson_packing_norm(
        tree, np.concatenate([decomposition.tops, decomposition.bad])
    )
    logger.info("corona decomposition: %d regimes, %d bad cubes, packing %.4g in %.2fs",
                len(regimes), len(decomposition.bad), decomposition.packing, time.perf_counter() - started)
    return decomposition


@dataclass
class LabeledTree:
    """Red/blue colors from the oscillation of u over U*_Q, plus yellow flags."""
    frame: pd.DataFrame
    eps: float
    slack: float

    @property
    def color(self) -> np.ndarray:
        return self.frame["color"].to_numpy()

    @property
    def red(self) -> np.ndarray:
        return np.flatnonzero(self.color == "red")

    @property
    def blue(self) -> np.ndarray:
        return np.flatnonzero(self.color == "blue")

    @property
    def yellow(self) -> np.ndarray:
        return np.flatnonzero(self.frame["yellow"].to_numpy())


def label_cubes(
    builder: RegionBuilder,
    u: np.ndarray,
    eps: float,
    decomposition: Optional[CoronaDecomposition] = None,
    gradient: Optional[np.ndarray] = None
) -> LabeledTree:
    """
    Color every cube: red iff sup - inf of u over U*_Q is at least ε/1000.

    Cubes whose U*_Q holds no grid cell are "unresolved", and so is every
    cube below them.

    Args:
        builder: Region builder.
        u: Values of a solution on the Ω cells, with sup |u| ≤ 1.
        eps: ε.
        decomposition: Corona decomposition supplying the yellow flags.
        gradient: |∇u| per cell for the reported grid slack.

    Returns:
        The LabeledTree.
    """
    u = np.asarray(u, dtype=float)
    if len(u) and np.max(np.abs(u)) > 1 + 1e-9:
        raise ParameterError("u must be normalized to sup |u| ≤ 1")
    tree = builder.tree
    n = len(tree.cubes)
    osc = np.full(n, np.nan)
    color = np.empty(n, dtype=object)
    parent = tree.cubes["parent"].to_numpy()
    for q in range(n):
        if parent[q] >= 0 and color[parent[q]] == "unresolved":
            color[q] = "unresolved"
            continue
        cells = builder.cells(q, "star")
        if len(cells) == 0:
            color[q] = "unresolved"
            continue
        osc[q] = float(np.ptp(u[cells]))
        color[q] = "red" if osc[q] >= eps * RED_FRACTION else "blue"
    yellow = decomposition.yellow() if decomposition is not None else np.zeros(n, dtype=bool)
    slack = float(np.max(gradient)) * builder.grid.h if gradient is not None and len(gradient) else 0.0
    unresolved = int(np.sum(color == "unresolved"))
    if unresolved:
        logger.warning("%d cubes are unresolved by the grid", unresolved)
    frame = pd.DataFrame({"cube": np.arange(n), "osc": osc, "color": color, "yellow": yellow})
    return LabeledTree(frame=frame, eps=eps, slack=slack)


@dataclass
class SubRegime:
    top: int
    members: np.ndarray
    stopping: np.ndarray
    classes: Dict[str, np.ndarray]
    bottom: np.ndarray
    kind: str = ""
    truncation: int = -1
    stopping_n: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    stopping_blue_n: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    other_n: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _stop_reasons(
    kids: np.ndarray,
    color: np.ndarray,
    yellow: np.ndarray,
    values: np.ndarray,
    top_value: float,
    eps: float
) -> Dict[str, bool]:
    colors = color[kids]
    red = bool(np.any(colors == "red"))
    unresolved = bool(np.any(colors == "unresolved"))
    far = bool(np.any(np.abs(values[kids] - top_value) > eps * STOP_FRACTION))
    return {
        "R": red,
        "SB": (not red and not unresolved and far),
        "Y": bool(np.any(yellow[kids])),
        "U": unresolved and not red,
    }


def decompose_blue(
    builder: RegionBuilder,
    regime: Regime,
    labels: LabeledTree,
    corkscrew_values: np.ndarray,
    eps: float
) -> List[SubRegime]:
    """
    Split the blue cubes of a regime into coherent subregimes 𝐒_j.

    The largest unassigned blue cube (ties by index) becomes Q(𝐒_j); the
    family stops at sibling groups in which a cube is red, deviates from
    u(X_{Q(𝐒_j)}) by more than ε/100 while all are blue, or is yellow.
    Sibling groups stop together.

    Args:
        builder: Region builder.
        regime: The corona regime 𝒮.
        labels: Colors and yellow flags.
        corkscrew_values: u(X_Q) for every cube (NaN where unresolved).
        eps: ε.

    Returns:
        Subregimes in order of construction.
    """
    tree = builder.tree
    frame = tree.cubes
    first = frame["first_child"].to_numpy()
    count = frame["n_children"].to_numpy()
    color = labels.color
    yellow = labels.frame["yellow"].to_numpy()
    in_regime = np.zeros(len(frame), dtype=bool)
    in_regime[regime.members] = True
    blue = [int(q) for q in regime.members if color[q] == "blue"]
    assigned = np.zeros(len(frame), dtype=bool)
    result: List[SubRegime] = []
    for top in blue:
        if assigned[top]:
            continue
        top_value = float(corkscrew_values[top])
        members = [top]
        stopping: List[int] = []
        classes: Dict[str, List[int]] = {"R": [], "SB": [], "Y": [], "U": []}
        bottom: List[int] = []
        stack = [top]
        while stack:
            q = stack.pop()
            kids = np.arange(first[q], first[q] + count[q])
            if len(kids) == 0:
                continue
            if not np.all(in_regime[kids]):
                bottom.extend(int(k) for k in kids)
                continue
            reasons = _stop_reasons(kids, color, yellow, corkscrew_values, top_value, eps)
            if any(reasons.values()):
                stopping.extend(int(k) for k in kids)
                bottom.extend(int(k) for k in kids)
                for key, fired in reasons.items():
                    if fired:
                        classes[key].extend(int(k) for k in kids)
                continue
            members.extend(int(k) for k in kids)
            stack.extend(int(k) for k in kids[::-1])
        members_array = np.sort(np.array(members, dtype=np.int64))
        assigned[members_array] = True
        result.append(SubRegime(
            top=top, members=members_array, stopping=np.sort(np.array(stopping, dtype=np.int64)),
            classes={k: np.sort(np.array(v, dtype=np.int64)) for k, v in classes.items()},
            bottom=np.sort(np.array(bottom, dtype=np.int64))
        ))
    logger.debug("regime %d: %d subregimes", regime.top, len(result))
    return result


def subregime_oscillation(builder: RegionBuilder, sub: SubRegime, u: np.ndarray, corkscrew_values: np.ndarray) -> float:
    """sup |u - u(X_{Q(𝐒)})| over the fattened sawtooth of the subregime."""
    cells = builder.union_cells(sub.members, "star")
    if len(cells) == 0:
        return 0.0
    return float(np.max(np.abs(u[cells] - corkscrew_values[sub.top])))


def _union_sigma(tree: DyadicTree, cubes: np.ndarray) -> float:
    return float(tree.cubes["sigma"].to_numpy()[cubes].sum()) if len(cubes) else 0.0


def truncated_family(tree: DyadicTree, top: int, stopping: np.ndarray, n: int) -> np.ndarray:
    """𝓕_N: cubes of 𝓕 at most N generations below the top, plus the generation-N cubes under none of them."""
    gens = tree.cubes["generation"].to_numpy()
    top_gen = int(gens[top])
    shallow = stopping[gens[stopping] - top_gen <= n]
    level = tree.descendants(top, include_self=False, max_generation=top_gen + n)
    level = level[gens[level] == top_gen + n]
    covered = np.zeros(len(level), dtype=bool)
    for f in shallow:
        covered |= np.array([tree.contains(int(f), int(c)) for c in level], dtype=bool)
    return np.sort(np.concatenate([shallow, level[~covered]]).astype(np.int64))


def choose_truncation(tree: DyadicTree, sub: SubRegime, lam: float) -> None:
    """Smallest N with σ(∪𝓕^SB_N) ≥ (1-4λ)σ(Q(𝐒)), capped by the tree depth; fills 𝓕_N, 𝓕^SB_N, 𝓕^O_N."""
    frame = tree.cubes
    gens = frame["generation"].to_numpy()
    top_gen = int(gens[sub.top])
    sigma_top = float(frame.at[sub.top, "sigma"])
    depth = tree.max_depth - top_gen
    sb = sub.classes["SB"]
    chosen = depth
    for n in range(1, depth + 1):
        if _union_sigma(tree, sb[gens[sb] - top_gen <= n]) >= (1 - 4 * lam) * sigma_top * (1 - 1e-12):
            chosen = n
            break
    sub.truncation = chosen
    sub.stopping_n = truncated_family(tree, sub.top, sub.stopping, chosen)
    sub.stopping_blue_n = sb[gens[sb] - top_gen <= chosen]
    sub.other_n = np.setdiff1d(sub.stopping_n, sub.stopping_blue_n)


@dataclass
class TypeReport:
    counts: Dict[str, int]
    packing: Dict[str, float]
    total_packing: float
    shapes: Dict[str, float]
    lam: float
    eps: float


def classify_subregime(tree: DyadicTree, sub: SubRegime, lam: float) -> str:
    sigma_top = float(tree.cubes.at[sub.top, "sigma"])
    threshold = lam * sigma_top * (1 - 1e-12)
    if sigma_top - _union_sigma(tree, sub.stopping) >= threshold:
        return "T1"
    if _union_sigma(tree, sub.classes["R"]) >= threshold:
        return "T2"
    if _union_sigma(tree, sub.classes["Y"]) >= threshold:
        return "T3"
    return "T4"


def classify_and_pack(tree: DyadicTree, subregimes: Sequence[SubRegime], lam: float = DEFAULT_LAMBDA, eps: float = 1.0) -> TypeReport:
    """
    Assign T1-T4, truncate the T4 families, and measure the packing norms of
    the maximal cubes per type and in total.

    `shapes` holds each norm rescaled by its expected growth: ×λ for T1 and T3,
    ×λε² for T2, ×ε² for T4 and the total.
    """
    if not 0 < lam < 1:
        raise ParameterError("λ must lie in (0, 1)")
    by_type: Dict[str, List[int]] = {t: [] for t in TYPES}
    for sub in subregimes:
        sub.kind = classify_subregime(tree, sub, lam)
        by_type[sub.kind].append(sub.top)
        if sub.kind == "T4":
            choose_truncation(tree, sub, lam)
    packing = {t: carleson_packing_norm(tree, tops)[0] for t, tops in by_type.items()}
    total, _ = carleson_packing_norm(tree, [s.top for s in subregimes])
    shapes = {
        "T1": packing["T1"] * lam, "T2": packing["T2"] * lam * eps ** 2,
        "T3": packing["T3"] * lam, "T4": packing["T4"] * eps ** 2, "total": total * lam * eps ** 2,
    }
    report = TypeReport(counts={t: len(v) for t, v in by_type.items()}, packing=packing, total_packing=total,
                        shapes=shapes, lam=lam, eps=eps)
    logger.info("subregime types %s, total packing %.4g", report.counts, total)
    return report


@dataclass
class PackingReport:
    red: float
    yellow: float
    corona: float
    eps: float

    @property
    def red_scaled(self) -> float:
        return self.red * self.eps ** 2

    @property
    def yellow_bound_holds(self) -> bool:
        return self.yellow <= self.corona + 1 + 1e-9


def red_yellow_packing(tree: DyadicTree, labels: LabeledTree, decomposition: CoronaDecomposition) -> PackingReport:
    red, _ = carleson_packing_norm(tree, labels.red)
    yellow, _ = carleson_packing_norm(tree, np.flatnonzero(decomposition.yellow()))
    return PackingReport(red=red, yellow=yellow, corona=decomposition.packing, eps=labels.eps)


@dataclass
class OscReport:
    """Quantities of the oscillation lower bound on a Type 4 sawtooth Ω_*."""
    truncation: int
    cells: int
    boundary_integral: float
    energy_delta: float
    energy_green: float
    c3: float
    omega_delta_star: float
    cover_needed: float
    cover_bound: float
    other_mass: float
    per_cube_max: float
    notes: List[str] = field(default_factory=list)
    lam: float = DEFAULT_LAMBDA

    @property
    def cover_passed(self) -> bool:
        return self.cover_needed <= self.cover_bound

    @property
    def other_mass_ok(self) -> bool:
        return self.other_mass <= 8 * self.lam + 1e-12


def _exit_point(builder: RegionBuilder, q: int, inside: np.ndarray, theta_min: float, samples: int = 257) -> Optional[np.ndarray]:
    """First point of P_Q(θ), θ decreasing from 1, whose cell is not in Ω_*."""
    grid = builder.grid
    for theta in np.linspace(1.0, theta_min, samples):
        point = segment_point(builder, q, float(theta))
        cell = int(grid.locate(point)[0])
        if cell < 0 or not inside[cell]:
            return point
    return None


def type4_oscillation_experiment(
    problem: EllipticProblem,
    builder: RegionBuilder,
    sub: SubRegime,
    u: np.ndarray,
    data,
    eps: float,
    lam: float = DEFAULT_LAMBDA,
    theta0: Optional[float] = None
) -> OscReport:
    """
    Both sides of the sawtooth estimate on Ω_* = Ω_{𝓕_N, Q(𝐒)}, the
    boundary integral ∫(u - u(X_*))² dω_*, and the covering diagnostics.

    Args:
        problem: The assembled problem on Ω.
        builder: Region builder.
        sub: A subregime with its truncated family filled in.
        u: Solution values on the Ω cells.
        data: Boundary data u was solved with.
        eps: ε.
        lam: λ.
        theta0: θ₀; defaults to the builder's.

    Returns:
        The OscReport.
    """
    tree = builder.tree
    grid = builder.grid
    theta0 = builder.theta0 if theta0 is None else theta0
    notes: List[str] = []
    if sub.truncation < 0:
        choose_truncation(tree, sub, lam)
    family = sub.stopping_n
    truncation = sub.truncation
    members = sawtooth_members(tree, sub.top, family)
    while truncation > 1 and any(len(builder.cells(int(q))) == 0 for q in members):
        truncation -= 1
        family = truncated_family(tree, sub.top, sub.stopping, truncation)
        members = sawtooth_members(tree, sub.top, family)
        notes.append(f"truncation lowered to N={truncation}: a member region holds no grid cell")
    cells = builder.union_cells(members, "plain")
    if len(cells) == 0:
        raise GeometryError("Ω_* holds no grid cell", {"top": int(sub.top)})
    pole = builder.corkscrews.loc[sub.top, ["X", "Y"]].to_numpy(dtype=float)
    field_ = problem.grid.to_field(u, name="u")
    identity = green_energy_identity(problem, field_, data, cells, pole)
    sigma_top = float(tree.cubes.at[sub.top, "sigma"])
    density = field_.gradient_norm() ** 2 * grid.delta * grid.h ** 2
    energy_delta = float(density[cells].sum())
    c3 = sigma_top * eps ** 2 / energy_delta if energy_delta > 0 else float("inf")

    sub_problem = problem.restrict(cells)
    pole_cell = int(grid.locate(pole)[0])
    neighbor_mass, _, _ = sub_problem.measure(pole_cell)
    points = grid.centers[sub_problem.neighbor_cell]
    inside = np.zeros(grid.n_cells, dtype=bool)
    inside[cells] = True
    r_star = float(builder.corkscrews.at[sub.top, "r"])
    x_star2 = _exit_point(builder, sub.top, inside, 0.0)
    if x_star2 is None:
        notes.append("segment from X_* to its touching point never leaves Ω_*")
        x_star2 = pole
    near = np.hypot(points[:, 0] - x_star2[0], points[:, 1] - x_star2[1]) < r_star
    omega_delta_star = float(neighbor_mass[near].sum())

    c_cs = float(builder.corkscrews.at[sub.top, "r"] / tree.cubes.at[sub.top, "side"])
    exits, radii, exit_cubes = [], [], []
    sigma = tree.cubes["sigma"].to_numpy()
    per_cube = 0.0
    for q in family:
        point = _exit_point(builder, int(q), inside, theta0)
        if point is None:
            notes.append(f"P_Q(θ) stays in Ω_* on [θ0, 1] for cube {int(q)}")
            continue
        rho = lam * theta0 * float(builder.corkscrews.at[q, "r"]) / 2
        exits.append(point)
        radii.append(rho)
        exit_cubes.append(int(q))
    cover_needed = 0.0
    if np.any(near) and exits:
        exits_arr = np.array(exits)
        radii_arr = np.array(radii)
        d = np.hypot(points[near][:, None, 0] - exits_arr[None, :, 0], points[near][:, None, 1] - exits_arr[None, :, 1])
        cover_needed = float(np.max(np.min(d / radii_arr[None, :], axis=1)))
        for k, q in enumerate(exit_cubes):
            ball = np.hypot(points[:, 0] - exits_arr[k, 0], points[:, 1] - exits_arr[k, 1]) < cover_needed * radii_arr[k]
            mass = float(neighbor_mass[ball].sum())
            per_cube = max(per_cube, mass / (sigma[q] / sigma_top))
    cover_bound = 2 * 2 * (builder.k0 + 2 * tree.a1 + 1) / (max(c_cs, 1e-12) * lam * theta0)
    other_mass = _union_sigma(tree, np.setdiff1d(family, sub.stopping_blue_n)) / sigma_top
    report = OscReport(
        truncation=truncation, cells=len(cells), boundary_integral=identity.rhs, energy_delta=energy_delta,
        energy_green=identity.lhs, c3=c3, omega_delta_star=omega_delta_star, cover_needed=cover_needed,
        cover_bound=cover_bound, other_mass=other_mass, per_cube_max=per_cube, notes=notes, lam=lam
    )
    logger.info("type 4 experiment on cube %d: integral %.4g (ε²=%.4g), ω_*(Δ_*)=%.3g, cover M %.3g",
                sub.top, report.boundary_integral, eps ** 2, omega_delta_star, cover_needed)
    return report


def decomposition_table(
    tree: DyadicTree,
    decomposition: CoronaDecomposition,
    labels: Optional[LabeledTree] = None,
    subregimes: Sequence[SubRegime] = ()
) -> pd.DataFrame:
    """One row per cube: regime, subregime, color, yellow, type and stopping class."""
    n = len(tree.cubes)
    sub_of = np.full(n, -1, dtype=np.int64)
    kind = np.full(n, "", dtype=object)
    f_class = np.full(n, "", dtype=object)
    for index, sub in enumerate(subregimes):
        sub_of[sub.members] = index
        kind[sub.members] = sub.kind
        for key, cubes in sub.classes.items():
            for c in cubes:
                f_class[c] = key if not f_class[c] else f_class[c] + "+" + key
    return pd.DataFrame({
        "cube": np.arange(n),
        "regime": decomposition.regime_of,
        "subregime": sub_of,
        "color": labels.color if labels is not None else np.full(n, "", dtype=object),
        "yellow": decomposition.yellow(),
        "type": kind,
        "f_class": f_class,
    })
