import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from labutils.boundary_util import BoundarySet, Box
from labutils.dyadic_util import DyadicTree
from labutils.elliptic_util import EllipticProblem, MeasureCache, TreeMeasure, elliptic_measure_rows
from labutils.error_util import ParameterError
from labutils.grid_util import CoefficientField, DomainGrid, identity_coefficients
from labutils.whitney_util import RegionBuilder

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
DEFAULT_MAX_STEPS = 5000
DEFAULT_BATCH = 20000
MAX_DISCARDED = 1e-3

ABSORBED, LEAKED, DISCARDED = 0, 1, 2


@dataclass
class WosEstimate:
    """Walk-on-spheres estimate of the Laplacian exit law from one pole."""
    measure: TreeMeasure
    stderr: np.ndarray
    walkers: int
    absorbed: int
    leaked: int
    discarded: int
    mean_steps: float
    seed: int

    @property
    def discarded_fraction(self) -> float:
        return self.discarded / self.walkers if self.walkers else 0.0

    @property
    def counted(self) -> int:
        return self.walkers - self.discarded

    def to_frame(self) -> pd.DataFrame:
        cubes = self.measure.tree.cubes
        return pd.DataFrame({
            "cube": cubes.index.to_numpy(),
            "generation": cubes["generation"].to_numpy(),
            "mass": self.measure.cube_mass,
            "stderr": self.stderr,
        })


def _box_gap(box: Box, points: np.ndarray) -> np.ndarray:
    return np.minimum.reduce([
        points[:, 0] - box.x0, box.x1 - points[:, 0],
        points[:, 1] - box.y0, box.y1 - points[:, 1]
    ])


def _walk_batch(
    boundary: BoundarySet,
    start: np.ndarray,
    n: int,
    rng: np.random.Generator,
    tolerance: float,
    max_steps: int
) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Run n walkers from `start` until each one is absorbed on Σ, leaves through
    the ambient box or hits the step cap.

    Returns:
        Exit points (n, 2), status codes (n,) and the total step count.
    """
    oracle = boundary.oracle
    box = boundary.ambient_box
    position = np.tile(np.asarray(start, dtype=float), (n, 1))
    exit_point = np.full((n, 2), np.nan)
    status = np.full(n, DISCARDED, dtype=np.int8)
    active = np.arange(n)
    steps = 0

    for _ in range(max_steps):
        if len(active) == 0:
            break
        p = position[active]
        d_sigma, near = oracle.nearest(p)
        d_box = _box_gap(box, p)
        radius = np.minimum(d_sigma, d_box)

        hit_sigma = (d_sigma < tolerance) & (d_sigma <= d_box)
        hit_box = (d_box < tolerance) & ~hit_sigma
        exit_point[active[hit_sigma]] = near[hit_sigma]
        status[active[hit_sigma]] = ABSORBED
        exit_point[active[hit_box]] = p[hit_box]
        status[active[hit_box]] = LEAKED

        moving = ~(hit_sigma | hit_box)
        active = active[moving]
        angle = rng.uniform(0.0, 2.0 * np.pi, size=len(active))
        r = radius[moving]
        position[active, 0] += r * np.cos(angle)
        position[active, 1] += r * np.sin(angle)
        steps += len(active)

    return exit_point, status, steps


def wos_exit_distribution(
    tree: DyadicTree,
    pole: Sequence[float],
    walkers: int = 10000,
    seed: int = 0,
    tolerance: float = DEFAULT_TOLERANCE,
    max_steps: int = DEFAULT_MAX_STEPS,
    batch_size: int = DEFAULT_BATCH,
    workers: int = 1
) -> WosEstimate:
    """
    Estimate the harmonic measure ω^X on the dyadic cubes by walk on spheres.

    Each step jumps to a uniform point on the largest circle around the walker
    that avoids both Σ and the ambient box; the radius is the exact piece-list
    distance. A walker is absorbed once it is within `tolerance` of Σ and is
    attributed to the atom nearest to its projection. Walkers that reach the
    box are counted as leakage, matching the zero data the solver puts there.

    Args:
        tree: Dyadic tree on the boundary; its boundary defines Ω.
        pole: Starting point X ∈ Ω.
        walkers: Number of walkers.
        seed: Master seed; batches draw from SeedSequence(seed).spawn.
        tolerance: Absorption distance.
        max_steps: Step cap per walker; capped walkers are discarded.
        batch_size: Walkers per batch.
        workers: Thread pool size for the batches.

    Returns:
        A WosEstimate whose measure has kind "wos".
    """
    boundary = tree.boundary
    pole = np.asarray(pole, dtype=float)
    if walkers <= 0 or tolerance <= 0 or max_steps <= 0:
        raise ParameterError("walkers, tolerance and max_steps must be positive")
    if not boundary.in_domain(pole[None, :])[0]:
        raise ParameterError(f"pole {tuple(pole)} is not an interior point of Ω", {"pole": pole.tolist()})

    sizes = [batch_size] * (walkers // batch_size)
    if walkers % batch_size:
        sizes.append(walkers % batch_size)
    generators = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(sizes))]

    started = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        batches = list(pool.map(
            lambda job: _walk_batch(boundary, pole, job[0], job[1], tolerance, max_steps),
            zip(sizes, generators)
        ))
    exit_point = np.concatenate([b[0] for b in batches])
    status = np.concatenate([b[1] for b in batches])
    steps = sum(b[2] for b in batches)

    absorbed = status == ABSORBED
    counted = int(np.sum(status != DISCARDED))
    atom_counts = np.zeros(len(tree.atoms))
    if np.any(absorbed):
        atom, _ = tree.locate(exit_point[absorbed])
        atom_counts = np.bincount(atom, minlength=len(tree.atoms)).astype(float)
    scale = 1.0 / max(counted, 1)
    atom_mass = atom_counts * scale
    cube_mass = tree.cube_masses(atom_mass)
    stderr = np.sqrt(np.clip(cube_mass * (1.0 - cube_mass), 0.0, None) * scale)

    estimate = WosEstimate(
        measure=TreeMeasure(
            tree=tree, atom_mass=atom_mass, cube_mass=cube_mass, kind="wos",
            pole=(float(pole[0]), float(pole[1])), leakage=float(np.sum(status == LEAKED)) * scale
        ),
        stderr=stderr,
        walkers=walkers,
        absorbed=int(absorbed.sum()),
        leaked=int(np.sum(status == LEAKED)),
        discarded=int(np.sum(status == DISCARDED)),
        mean_steps=steps / walkers,
        seed=seed
    )
    logger.info("walk on spheres from %s: %d walkers, %d absorbed, %d leaked, %d discarded, %.1f steps/walker in %.2fs",
                estimate.measure.pole, walkers, estimate.absorbed, estimate.leaked, estimate.discarded,
                estimate.mean_steps, time.perf_counter() - started)
    if estimate.discarded_fraction > MAX_DISCARDED:
        logger.warning("%.3f%% of walkers hit the step cap", 100.0 * estimate.discarded_fraction)
    return estimate


@dataclass
class AgreementReport:
    table: pd.DataFrame
    fraction: float
    worst_z: float
    z: float

    @property
    def passed_fraction(self) -> float:
        return self.fraction


def compare_to_reference(
    estimate: WosEstimate,
    reference: np.ndarray,
    cubes: Optional[Sequence[int]] = None,
    z: float = 3.0,
    floor: Optional[float] = None
) -> AgreementReport:
    """
    Per-cube agreement of a walk-on-spheres estimate with reference masses.

    A cube agrees when |estimate − reference| ≤ z·s.e. + floor. The default
    floor of one walker's mass keeps cubes that no walker reached from
    failing on a zero standard error.
    """
    tree = estimate.measure.tree
    if cubes is None:
        cubes = np.arange(len(tree))
    cubes = np.asarray(cubes, dtype=np.int64)
    reference = np.asarray(reference, dtype=float)
    if len(reference) != len(tree):
        raise ParameterError("reference needs one mass per cube")
    if floor is None:
        floor = 1.0 / max(estimate.counted, 1)
    diff = np.abs(estimate.measure.cube_mass[cubes] - reference[cubes])
    se = estimate.stderr[cubes]
    ok = diff <= z * se + floor
    score = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff > floor, np.inf, 0.0))
    table = pd.DataFrame({
        "cube": cubes,
        "estimate": estimate.measure.cube_mass[cubes],
        "stderr": se,
        "reference": reference[cubes],
        "z": score,
        "agrees": ok,
    })
    return AgreementReport(
        table=table,
        fraction=float(ok.mean()) if len(ok) else 1.0,
        worst_z=float(score.max()) if len(score) else 0.0,
        z=z
    )


def halfplane_poisson_density(pole: Sequence[float], t: np.ndarray, line_y: float = 0.0) -> np.ndarray:
    """Poisson kernel of {y > line_y} at boundary abscissae t."""
    x, y = float(pole[0]), float(pole[1]) - line_y
    if y <= 0:
        raise ParameterError("pole must lie above the line")
    t = np.asarray(t, dtype=float)
    return y / (np.pi * ((x - t) ** 2 + y ** 2))


def halfplane_poisson_mass(points: np.ndarray, a: float, b: float, line_y: float = 0.0) -> np.ndarray:
    """
    Harmonic measure of the interval [a, b] seen from each point, which is
    also the bounded harmonic extension of its indicator.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    y = points[:, 1] - line_y
    if np.any(y <= 0):
        raise ParameterError("points must lie above the line")
    return (np.arctan((b - points[:, 0]) / y) - np.arctan((a - points[:, 0]) / y)) / np.pi


def halfplane_cube_masses(tree: DyadicTree, pole: Sequence[float], line_y: float = 0.0) -> np.ndarray:
    """Exact Poisson masses of every cube of a tree built on a horizontal line."""
    g = tree.atoms.geometry
    a = np.minimum(g[:, 0], g[:, 2])
    b = np.maximum(g[:, 0], g[:, 2])
    atom_mass = (np.arctan((b - pole[0]) / (pole[1] - line_y)) - np.arctan((a - pole[0]) / (pole[1] - line_y))) / np.pi
    return tree.cube_masses(atom_mass)


def disk_green(points: np.ndarray, pole: Sequence[float], radius: float = 1.0, center: Sequence[float] = (0.0, 0.0)) -> np.ndarray:
    """Closed-form Green's function of -Δ on the disk B(center, radius)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    z = (points[:, 0] - center[0]) + 1j * (points[:, 1] - center[1])
    w = (pole[0] - center[0]) + 1j * (pole[1] - center[1])
    with np.errstate(divide="ignore"):
        return np.log(np.abs(radius ** 2 - z * np.conj(w)) / (radius * np.abs(z - w))) / (2.0 * np.pi)


def angular_masses(tree: DyadicTree, atom_mass: np.ndarray, arcs: int, center: Sequence[float] = (0.0, 0.0)) -> np.ndarray:
    """Mass of `arcs` equal arcs of a circle, each atom assigned by the angle of its center."""
    c = tree.atoms.centers
    angle = np.mod(np.arctan2(c[:, 1] - center[1], c[:, 0] - center[0]), 2.0 * np.pi)
    arc = np.minimum((angle / (2.0 * np.pi) * arcs).astype(np.int64), arcs - 1)
    return np.bincount(arc, weights=atom_mass, minlength=arcs)


@dataclass
class ComparisonReport:
    """Density ratio dω_L/dω_Δ on the line cubes for every sampled pole."""
    table: pd.DataFrame
    sup_ratio: float
    inf_ratio: float
    poles: List[Tuple[float, float]]
    generation: int
    notes: Dict[str, float] = field(default_factory=dict)


def line_cubes(tree: DyadicTree, generation: int) -> np.ndarray:
    """Cubes of one generation whose atoms all lie on a segment component."""
    ids = tree.generation(generation)
    on_segment = ~tree.atoms.is_box
    cumulative = np.concatenate([[0], np.cumsum(~on_segment)])
    starts = tree.cubes["start"].to_numpy()[ids]
    stops = tree.cubes["stop"].to_numpy()[ids]
    return ids[(cumulative[stops] - cumulative[starts]) == 0]


def comparison_test_eq1(
    grid: DomainGrid,
    tree: DyadicTree,
    coefficients: CoefficientField,
    poles: Sequence[Sequence[float]],
    generation: int,
    method: str = "splu",
    workers: int = 1,
    mass_floor: float = 1e-12
) -> ComparisonReport:
    """
    Compare the elliptic measures of L = -div A∇ and of the Laplacian on the
    line part of the boundary.

    A must equal the identity outside the unit ball; densities are cube mass
    over σ on the line cubes of `generation`.

    Args:
        grid: Grid of the domain (typically the half-plane above the line).
        tree: Dyadic tree on the same boundary.
        coefficients: The field A.
        poles: Interior poles p.
        generation: Cube generation at which densities are taken.
        method: Linear solver for both problems.
        workers: Thread pool size for the measure rows.
        mass_floor: Laplacian cube masses below this are left out of the ratio.

    Returns:
        A ComparisonReport; identity coefficients give ratio 1.
    """
    identity_radius = coefficients.identity_outside
    if identity_radius is None or identity_radius > 1.0 or not coefficients.is_identity_outside(grid, 1.0):
        raise ParameterError(
            "comparison needs A equal to the identity outside the unit ball",
            {"descriptor": coefficients.descriptor}
        )
    cubes = line_cubes(tree, generation)
    if len(cubes) == 0:
        raise ParameterError(f"no line cubes at generation {generation}")
    if len(poles) == 0:
        raise ParameterError("no poles")

    problem_l = EllipticProblem(grid, coefficients, method=method)
    problem_lap = EllipticProblem(grid, identity_coefficients(grid), method=method)
    rows_l = elliptic_measure_rows(problem_l, tree, poles, workers=workers)
    rows_lap = elliptic_measure_rows(problem_lap, tree, poles, workers=workers)

    sigma = tree.cubes["sigma"].to_numpy()[cubes]
    frames = []
    for pole, row_l, row_lap in zip(poles, rows_l, rows_lap):
        density_l = row_l.cube_mass[cubes] / sigma
        density_lap = row_lap.cube_mass[cubes] / sigma
        keep = row_lap.cube_mass[cubes] > mass_floor
        frames.append(pd.DataFrame({
            "pole_x": float(pole[0]),
            "pole_y": float(pole[1]),
            "cube": cubes[keep],
            "density_l": density_l[keep],
            "density_laplace": density_lap[keep],
            "ratio": density_l[keep] / density_lap[keep],
        }))
    table = pd.concat(frames, ignore_index=True)
    report = ComparisonReport(
        table=table,
        sup_ratio=float(table["ratio"].max()) if len(table) else float("nan"),
        inf_ratio=float(table["ratio"].min()) if len(table) else float("nan"),
        poles=[(float(p[0]), float(p[1])) for p in poles],
        generation=generation,
        notes={"ellipticity": problem_l.ellipticity}
    )
    logger.info("comparison over %d poles and %d line cubes: sup ratio %.4g, inf ratio %.4g",
                len(poles), len(cubes), report.sup_ratio, report.inf_ratio)
    return report


def corkscrew_density_bound(
    builder: RegionBuilder,
    cache: MeasureCache,
    cubes: Sequence[int],
    generations_below: int = 2
) -> pd.DataFrame:
    """
    For each cube Q with pole at its corkscrew point, the largest value of
    σ(Q)·ω(P)/σ(P) over the descendants P of Q down to `generations_below`
    generations. A bounded column is the density upper bound for corkscrew
    poles.
    """
    tree = builder.tree
    corkscrews = builder.corkscrews
    gens = tree.cubes["generation"].to_numpy()
    sigma = tree.cubes["sigma"].to_numpy()
    rows = []
    for q in cubes:
        q = int(q)
        if corkscrews.at[q, "cell"] < 0 or corkscrews.at[q, "gamma"] <= 0:
            continue
        pole = corkscrews.loc[q, ["X", "Y"]].to_numpy(dtype=float)
        row = cache.row(pole)
        below = tree.descendants(q, include_self=True, max_generation=min(gens[q] + generations_below, tree.max_depth))
        density = row.cube_mass[below] / sigma[below]
        rows.append((q, int(gens[q]), float(density.max() * sigma[q]), float(row.cube_mass[q])))
    return pd.DataFrame(rows, columns=["cube", "generation", "bound", "omega"])
