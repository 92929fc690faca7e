import dataclasses
import logging
import time
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from config import Config
from labutils.approx_util import approximate, carleson_l1_norm
from labutils.boundary_util import BoundarySet, check_ahlfors_regularity
from labutils.corona_util import (
    SubRegime, brute_force_packing_norm, carleson_packing_norm, check_coherence, choose_truncation, classify_and_pack,
    decomposition_table, fit_a_infty, red_yellow_packing, type4_oscillation_experiment
)
from labutils.cover_util import converse_experiment, good_eps_cover
from labutils.dyadic_util import DyadicTree, build_dyadic_tree, check_dyadic_properties
from labutils.elliptic_util import (
    EllipticProblem, MeasureCache, elliptic_measure_rows, green_function, maximum_principle_gap, solve_dirichlet
)
from labutils.error_util import LabError, ParameterError
from labutils.estimates_util import (
    cme_constant, extend_data, green_energy_identity, resolved_cubes, verify_local_estimates, verify_measure_estimates
)
from labutils.grid_util import CoefficientField, DiscreteField, DomainGrid, build_grid
from labutils.io_util import (
    decode_mask, encode_mask, list_runs, load_manifest, write_grid, write_json, write_plot_script, write_table
)
from labutils.oracle_util import (
    angular_masses, compare_to_reference, comparison_test_eq1, corkscrew_density_bound, disk_green,
    halfplane_poisson_mass, wos_exit_distribution
)
from labutils.scenario_util import EXPERIMENTS, Scenario, build_boundary, build_coefficients, normalized_document
from labutils.varopoulos_util import (
    assemble_and_verify, atom_data, bmo_norm_and_decompose, extend_step_part, iterate_extension, linearity_check,
    subadditivity_check
)
from labutils.whitney_util import (
    RegionBuilder, WhitneyComplex, build_sawtooth, carleson_box, check_region_coverage, check_whitney,
    compute_corkscrews, region_overlap, whitney_decompose
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

AHLFORS_SCALES = (4.0 ** -1, 4.0 ** -2, 4.0 ** -3)
AHLFORS_BOUND = 16.0
MAX_PRINCIPLE_SLACK = 1e-8
LOCAL_BALLS = 48
MEASURE_CUBES = 24
POISSON_INTERVAL = (-0.25, 0.25)
POISSON_POINTS = tuple((x, y) for x in (-0.25, 0.0, 0.3) for y in (0.125, 0.25, 0.5))
POISSON_TOLERANCE = 0.01
DISK_TOLERANCE = 0.02
ORACLE_GENERATION = 4
ORACLE_FRACTION = 0.95
A_INFTY_S = 0.5
COMPARISON_POLES = 20

# Every example with a derived expected value, and the experiment whose output carries it.
DERIVED = {
    "boundary: dyadic properties (i)-(v) over sampled boundary points": "geometry",
    "boundary: Ahlfors ratios over r in {1/4, 1/16, 1/64}": "geometry",
    "whitney: both Whitney inequalities for every square": "geometry",
    "whitney: region coverage and bounded overlap": "geometry",
    "elliptic: half-plane indicator problem against the Poisson integral": "poisson",
    "elliptic: disk Green function against the closed form": "disk-green",
    "elliptic: Caccioppoli, Hölder and Harnack on corkscrew balls": "local-estimates",
    "elliptic: Bourgain, doubling, CFMS, change of pole": "measure-estimates",
    "elliptic: energy identity on Carleson box, sawtooth and fattened box": "green-energy",
    "elliptic: solver measure against walk on spheres": "oracle",
    "corona: A-infinity constant per Cantor generation": "a-infty",
    "corona: red, yellow and subregime packing norms": "packing",
    "corona: brute-force packing oracle": "packing",
    "corona: type 4 oscillation, cover and leftover mass": "type4",
    "approximator: gap at most eps on every grid point": "approximator",
    "approximator: Carleson norm of Phi against the norm of grad u per depth": "approximator",
    "approximator: good cover conditions and cover length": "good-cover",
    "approximator: per-level oscillation and cone integrals": "good-cover",
    "varopoulos: trace error and constants of the assembled extension": "varopoulos",
    "varopoulos: per-iteration decay, linearity and subadditivity": "varopoulos",
    "harness: comparison of boundary densities on the line": "comparison",
    "harness: disk exit law uniform over arcs": "oracle",
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    bound: float
    detail: str = ""

    @classmethod
    def at_most(cls, name: str, value: float, bound: float, detail: str = "") -> "CheckResult":
        value = float(value)
        return cls(name, bool(np.isfinite(value) and value <= bound), value, float(bound), detail)

    @classmethod
    def at_least(cls, name: str, value: float, bound: float, detail: str = "") -> "CheckResult":
        value = float(value)
        return cls(name, bool(np.isfinite(value) and value >= bound), value, float(bound), detail)

    @classmethod
    def holds(cls, name: str, flag: bool, detail: str = "") -> "CheckResult":
        return cls(name, bool(flag), 1.0 if flag else 0.0, 1.0, detail)


@dataclass
class Curve:
    frame: pd.DataFrame
    x: str
    columns: List[str]
    title: str
    logscale: str = ""


@dataclass
class ExperimentResult:
    name: str
    checks: List[CheckResult] = field(default_factory=list)
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    curves: Dict[str, Curve] = field(default_factory=dict)
    fields: Dict[str, DiscreteField] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, result: CheckResult) -> CheckResult:
        self.checks.append(result)
        return result

    def to_report(self) -> Dict[str, Any]:
        return {"name": self.name, "passed": self.passed, "checks": self.checks, "summary": self.summary}


@dataclass
class RunResult:
    scenario: Scenario
    out_dir: Optional[Path]
    experiments: List[ExperimentResult]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.experiments)

    @property
    def failures(self) -> List[Dict[str, Any]]:
        return [
            {"experiment": e.name, **dataclasses.asdict(c)}
            for e in self.experiments for c in e.checks if not c.passed
        ]

    def manifest(self) -> Dict[str, Any]:
        names = {e.name for e in self.experiments}
        return {
            "scenario": self.scenario.name,
            "schema_version": self.scenario.schema_version,
            "seed": self.scenario.seed,
            "passed": self.passed,
            "experiments": [
                {"name": e.name, "passed": e.passed, "tables": sorted([*e.tables, *e.curves]), "fields": sorted(e.fields)}
                for e in self.experiments
            ],
            "checks": [{"experiment": e.name, **dataclasses.asdict(c)} for e in self.experiments for c in e.checks],
            "derived": {k: v for k, v in DERIVED.items() if v in names},
        }


def lacunary_sign(x: np.ndarray, depth: int) -> np.ndarray:
    """±1 data sign(Σ_{j=1..depth} sin(2^j πx)), ties mapped to +1."""
    x = np.asarray(x, dtype=float)
    total = np.zeros_like(x)
    for j in range(1, depth + 1):
        total += np.sin(2.0 ** j * np.pi * x)
    return np.where(total >= 0, 1.0, -1.0)


class Lab:
    """The pipeline objects of one scenario, built on first use."""

    def __init__(self, scenario: Scenario, base: Optional[Path] = None):
        self.scenario = scenario
        self.base = base if base is not None else (Path(scenario.source).parent if scenario.source else None)

    def derive(self, **changes) -> "Lab":
        """A lab for the same scenario with some fields replaced."""
        return Lab(dataclasses.replace(self.scenario, **changes), self.base)

    @cached_property
    def boundary(self) -> BoundarySet:
        return build_boundary(self.scenario.boundary)

    @cached_property
    def tree(self) -> DyadicTree:
        return build_dyadic_tree(self.boundary, self.scenario.depth)

    @cached_property
    def grid(self) -> DomainGrid:
        return build_grid(self.boundary, self.scenario.h)

    @cached_property
    def coefficients(self) -> CoefficientField:
        return build_coefficients(self.scenario.coefficients, self.grid, self.base)

    @cached_property
    def problem(self) -> EllipticProblem:
        return EllipticProblem(self.grid, self.coefficients, method=self.scenario.solver,
                               tolerance=Config.SOLVER_TOLERANCE, maxiter=Config.SOLVER_MAXITER)

    @cached_property
    def complex(self) -> WhitneyComplex:
        return whitney_decompose(self.grid, self.boundary)

    @cached_property
    def builder(self) -> RegionBuilder:
        s = self.scenario
        corkscrews = compute_corkscrews(self.tree, self.grid, s.c_cs)
        return RegionBuilder(self.tree, self.complex, k0=s.k0, tau=s.tau, theta0=s.theta0,
                             kappa_factor=s.kappa_factor, corkscrews=corkscrews)

    @cached_property
    def cache(self) -> MeasureCache:
        return MeasureCache(self.problem, self.tree)

    @cached_property
    def top(self) -> int:
        """The root cube carrying the most surface measure."""
        roots = self.tree.roots
        sigma = self.tree.cubes["sigma"].to_numpy()[roots]
        return int(roots[np.argmax(sigma)])

    @cached_property
    def data(self) -> np.ndarray:
        """Carrier values of the lacunary ±1 data at the scenario depth, zero on the outer box."""
        depth = self.scenario.depth
        return extend_data(self.problem, lambda p: lacunary_sign(p[:, 0], depth), extend_outer=False)

    @cached_property
    def u(self) -> DiscreteField:
        return solve_dirichlet(self.problem, self.data, name="u")

    def far_poles(self) -> List[List[float]]:
        """Scenario poles, else points near the middle of each box edge that sit well inside Ω."""
        if self.scenario.poles:
            return [list(map(float, p)) for p in self.scenario.poles]
        box = self.boundary.ambient_box
        cx, cy = (box.x0 + box.x1) / 2, (box.y0 + box.y1) / 2
        candidates = np.array([
            [cx, box.y0 + 0.9 * box.height], [box.x1 - 0.1 * box.width, cy],
            [cx, box.y0 + 0.1 * box.height], [box.x0 + 0.1 * box.width, cy],
        ])
        keep = self.boundary.in_domain(candidates) & (
            self.boundary.oracle.distance(candidates) >= 0.25 * min(box.width, box.height)
        )
        poles = candidates[keep].tolist()
        if not poles:
            raise ParameterError(f"no far pole fits inside the box of {self.scenario.name}")
        return poles

    def sample_poles(self, count: int) -> List[List[float]]:
        if self.scenario.poles:
            return [list(map(float, p)) for p in self.scenario.poles]
        box = self.boundary.ambient_box
        rng = np.random.default_rng(self.scenario.seed)
        poles: List[List[float]] = []
        margin = 4 * self.scenario.h
        for _ in range(100):
            points = np.column_stack([
                rng.uniform(box.x0 + margin, box.x1 - margin, 4 * count),
                rng.uniform(box.y0 + margin, box.y1 - margin, 4 * count),
            ])
            ok = self.boundary.in_domain(points) & (self.boundary.oracle.distance(points) >= 0.25)
            poles.extend(points[ok].tolist())
            if len(poles) >= count:
                break
        return poles[:count]

    def carleson_balls(self, top: Optional[int] = None):
        """Centers of the cubes two generations below the top and radii ℓ(top)/2 … ℓ(top)/16."""
        tree = self.tree
        top = self.top if top is None else top
        gens = tree.cubes["generation"].to_numpy()
        target = min(int(gens[top]) + 2, tree.max_depth)
        below = tree.descendants(top, include_self=True)
        centers = tree.centers()[below[gens[below] == target]]
        side = float(tree.cubes.at[top, "side"])
        return centers.tolist(), [side * 2.0 ** -j for j in range(1, 5)]

    def sample_cubes(self, count: int) -> np.ndarray:
        cubes = resolved_cubes(self.builder)
        if len(cubes) <= count:
            return cubes
        return cubes[np.linspace(0, len(cubes) - 1, count).astype(np.int64)]

    def eps_approximator(self, eps: float, top: Optional[int] = None) -> Callable[[DiscreteField], Any]:
        top = self.top if top is None else top
        return lambda u: approximate(self.builder, self.cache, u, top, eps, self.scenario.m).approximator


ExperimentFunction = Callable[[Lab], ExperimentResult]
REGISTRY: Dict[str, ExperimentFunction] = {}


def experiment(name: str) -> Callable[[ExperimentFunction], ExperimentFunction]:
    if name not in EXPERIMENTS:
        raise ParameterError(f"experiment {name!r} is not a scenario experiment")

    def register(fn: ExperimentFunction) -> ExperimentFunction:
        REGISTRY[name] = fn
        return fn

    return register


@experiment("geometry")
def run_geometry(lab: Lab) -> ExperimentResult:
    result = ExperimentResult("geometry")
    dyadic = check_dyadic_properties(lab.tree)
    result.check(CheckResult.holds("dyadic properties", dyadic.passed, "; ".join(dyadic.violations[:5])))
    result.tables["cubes"] = lab.tree.to_frame()

    regularity = check_ahlfors_regularity(lab.boundary, AHLFORS_SCALES, seed=lab.scenario.seed)
    result.check(CheckResult.at_most("Ahlfors constant", regularity.constant, AHLFORS_BOUND))
    result.tables["ahlfors"] = pd.DataFrame({
        "r": regularity.scales, "c_min": regularity.c_min, "c_max": regularity.c_max,
    })

    whitney = check_whitney(lab.complex)
    result.check(CheckResult.holds(
        "Whitney inequalities", whitney.passed,
        f"{whitney.lower_violations} lower, {whitney.upper_violations} upper, {whitney.ratio_violations} ratio"
    ))
    result.tables["whitney"] = lab.complex.to_frame()

    coverage = check_region_coverage(lab.builder)
    result.check(CheckResult.holds("regions cover the domain", coverage.passed,
                                   f"{coverage.uncovered_cells} of {coverage.tested_cells} cells uncovered"))
    overlap = region_overlap(lab.builder)

    runs = encode_mask(lab.grid.mask)
    result.check(CheckResult.holds("mask run-length round trip",
                                   bool(np.array_equal(decode_mask(runs, lab.grid.mask.shape), lab.grid.mask))))
    result.tables["mask"] = runs
    result.tables["pieces"] = lab.boundary.piece_table()
    result.summary.update({
        "cubes": dyadic.n_cubes, "a0": lab.tree.a0, "a1": lab.tree.a1, "max_children": dyadic.max_children,
        "squares": whitney.n_squares, "cells": lab.grid.n_cells,
        "overlap_multiplicity": overlap.max_multiplicity, "overlap_area_ratio": overlap.area_ratio,
    })
    return result


@experiment("local-estimates")
def run_local_estimates(lab: Lab) -> ExperimentResult:
    result = ExperimentResult("local-estimates")
    data = extend_data(lab.problem, lambda p: 1.0 + np.tanh(p[:, 0]))
    u = solve_dirichlet(lab.problem, data)
    result.check(CheckResult.at_most("maximum principle", maximum_principle_gap(lab.problem, u, data), MAX_PRINCIPLE_SLACK))

    frame = lab.builder.corkscrews
    cubes = lab.sample_cubes(LOCAL_BALLS)
    balls = [(float(frame.at[q, "X"]), float(frame.at[q, "Y"]), float(frame.at[q, "gamma"] * frame.at[q, "r"] / 4))
             for q in cubes]
    report = verify_local_estimates(u, balls)
    lam = lab.problem.ellipticity
    result.check(CheckResult.at_least("balls tested", len(report.table), 1))
    result.check(CheckResult.at_most("Caccioppoli constant", report.max_caccioppoli, 4.0 * lam))
    result.check(CheckResult.at_least("Hölder exponent", report.min_alpha, 1e-3))
    result.check(CheckResult.at_most("Harnack ratio", report.max_harnack, 20.0))
    result.tables["local_estimates"] = report.table
    result.summary.update({"skipped": len(report.skipped), "ellipticity": lam})
    return result


@experiment("measure-estimates")
def run_measure_estimates(lab: Lab) -> ExperimentResult:
    result = ExperimentResult("measure-estimates")
    report = verify_measure_estimates(lab.problem, lab.builder, lab.far_poles(), lab.sample_cubes(MEASURE_CUBES),
                                      workers=lab.scenario.workers)
    lo, hi = report.cfms_range
    pole_lo, pole_hi = report.change_of_pole_range
    result.check(CheckResult.at_least("Bourgain constant", report.bourgain, 0.2))
    result.check(CheckResult.at_most("doubling constant", report.doubling, 8.0))
    result.check(CheckResult.at_least("CFMS lower", lo, 1.0 / 50))
    result.check(CheckResult.at_most("CFMS upper", hi, 50.0))
    result.check(CheckResult.at_least("change of pole lower", pole_lo, 1e-12))
    result.check(CheckResult.at_least("boundary Hölder exponent", report.holder_alpha, 1e-3))
    result.tables["measure_estimates"] = report.table
    result.summary.update({"skipped": report.skipped, "change_of_pole_upper": pole_hi})
    return result


def _line_height(lab: Lab) -> float:
    if lab.scenario.boundary.type != "halfplane":
        raise ParameterError(f"experiment needs a half-plane scenario, got {lab.scenario.boundary.type}")
    return lab.boundary.ambient_box.y0


@experiment("poisson")
def run_poisson(lab: Lab) -> ExperimentResult:
    result = ExperimentResult("poisson")
    line_y = _line_height(lab)
    a, b = POISSON_INTERVAL
    carriers = lab.problem.carriers
    points = carriers.point
    lifted = np.column_stack([points[:, 0], np.maximum(points[:, 1], line_y + 1e-300)])
    outer = carriers.outer
    data = np.where(points[:, 0] >= a, 1.0, 0.0) * np.where(points[:, 0] <= b, 1.0, 0.0)
    if np.any(outer):
        data[outer] = halfplane_poisson_mass(lifted[outer], a, b, line_y)
    u = solve_dirichlet(lab.problem, data, name="u")
    points = np.array([[x, line_y + y] for x, y in POISSON_POINTS])
    cells = lab.grid.locate(points)
    rows = []
    for point, cell in zip(points, cells):
        if cell < 0:
            continue
        center = lab.grid.centers[cell]
        exact = float(halfplane_poisson_mass(center[None, :], a, b, line_y)[0])
        value = float(u.values[cell])
        rows.append({"x": point[0], "y": point[1], "cell": int(cell), "u": value, "exact": exact,
                     "relative_error": abs(value - exact) / exact if exact > 0 else float("nan")})
    table = pd.DataFrame(rows, columns=["x", "y", "cell", "u", "exact", "relative_error"])
    tested = table.loc[table["exact"] >= 0.05, "relative_error"]
    result.check(CheckResult.at_least("points tested", len(tested), 1))
    result.check(CheckResult.at_most("Poisson relative error", tested.max() if len(tested) else float("nan"),
                                     POISSON_TOLERANCE))
    result.tables["poisson"] = table
    result.fields["u"] = u
    return result


@experiment("disk-green")
def run_disk_green(lab: Lab) -> ExperimentResult:
    result = ExperimentResult("disk-green")
    spec = lab.scenario.boundary
    if spec.type != "disk":
        raise ParameterError(f"experiment needs a disk scenario, got {spec.type}")
    green = green_function(lab.problem, (0.0, 0.0))
    pole = lab.grid.centers[green.pole_cell]
    centers = lab.grid.centers
    distance = np.hypot(centers[:, 0] - pole[0], centers[:, 1] - pole[1])
    far = np.flatnonzero((distance >= 0.3) & (lab.grid.delta >= 0.15))
    exact = disk_green(centers[far], pole, spec.radius)
    error = np.abs(green.field.values[far] - exact) / np.abs(exact)
    result.check(CheckResult.at_least("cells tested", len(far), 1))
    result.check(CheckResult.at_most("Green relative error", error.max() if len(error) else float("nan"), DISK_TOLERANCE))
    step = max(1, len(far) // 400)
    result.tables["disk_green"] = pd.DataFrame({
        "x": centers[far, 0], "y": centers[far, 1], "G": green.field.values[far], "exact": exact,
        "relative_error": error,
    }).iloc[::step].reset_index(drop=True)
    result.fields["G"] = green.field
    result.summary.update({"pole_x": float(pole[0]), "pole_y": float(pole[1]), "mean_error": float(error.mean())})
    return result


def _energy_cube(lab: Lab) -> int:
    """The shallowest resolved cube below the top whose children are resolved too."""
    tree = lab.tree
    resolved = set(int(q) for q in resolved_cubes(lab.builder))
    for q in sorted(resolved, key=lambda c: (int(tree.cubes.at[c, "generation"]), c)):
        kids = tree.children(q)
        if q != lab.top and len(kids) and all(int(k) in resolved for k in kids):
            return q
    raise ParameterError("no resolved cube with resolved children below the top")


@experiment("green-energy")
def run_green_energy(lab: Lab) -> ExperimentResult:
    result = ExperimentResult("green-energy")
    builder = lab.builder
    q = _energy_cube(lab)
    data = extend_data(lab.problem, lambda p: np.sin(3.0 * p[:, 0]))
    u = solve_dirichlet(lab.problem, data)
    pole = builder.corkscrews.loc[q, ["X", "Y"]].to_numpy(dtype=float)
    first_child = int(lab.tree.children(q)[0])
    shapes = {
        "carleson_box": carleson_box(builder, q),
        "sawtooth": build_sawtooth(builder, q, [first_child]).cells,
        "fattened_box": carleson_box(builder, q, "star"),
    }
    lam = max(lab.problem.ellipticity, 1.0)
    rows = []
    for shape, cells in shapes.items():
        identity = green_energy_identity(lab.problem, u, data, cells, pole)
        rows.append({"shape": shape, "cells": len(cells), "lhs": identity.lhs, "rhs": identity.rhs, "ratio": identity.ratio})
        result.check(CheckResult.at_least(f"{shape} ratio lower", identity.ratio, 1.0 / (2 * lam)))
        result.check(CheckResult.at_most(f"{shape} ratio upper", identity.ratio, 2 * lam))
    result.tables["green_energy"] = pd.DataFrame(rows, columns=["shape", "cells", "lhs", "rhs", "ratio"])
    result.summary.update({"cube": q, "ellipticity": lab.problem.ellipticity})
    return result


@experiment("oracle")
def run_oracle(lab: Lab) -> ExperimentResult:
    result = ExperimentResult("oracle")
    if lab.scenario.coefficients.type != "identity":
        raise ParameterError("walk on spheres estimates the Laplacian exit law only")
    s = lab.scenario
    pole = lab.far_poles()[0]
    estimate = wos_exit_distribution(lab.tree, pole, walkers=s.walkers, seed=s.seed, workers=s.workers)
    row = lab.cache.row(pole)
    gens = lab.tree.cubes["generation"].to_numpy()
    cubes = np.flatnonzero(gens <= ORACLE_GENERATION)
    agreement = compare_to_reference(estimate, row.cube_mass, cubes)
    result.check(CheckResult.at_least("cubes within 3 s.e.", agreement.fraction, ORACLE_FRACTION))
    result.check(CheckResult.at_most("discarded walkers", estimate.discarded_fraction, 1e-3))
    result.tables["agreement"] = agreement.table
    result.tables["wos"] = estimate.to_frame()
    if s.boundary.type == "disk":
        arcs = 4
        masses = angular_masses(lab.tree, estimate.measure.atom_mass, arcs)
        se = np.sqrt(np.maximum(masses * (1 - masses), 0.0) / max(estimate.counted, 1))
        ok = np.abs(masses - 1.0 / arcs) <= 3 * se + 1.0 / max(estimate.counted, 1)
        result.check(CheckResult.holds("uniform exit law over arcs", bool(ok.all()), f"masses {np.round(masses, 4).tolist()}"))
    result.summary.update({
        "pole": pole, "walkers": estimate.walkers, "leaked": estimate.leaked, "mean_steps": estimate.mean_steps,
        "worst_z": agreement.worst_z, "solver_leakage": row.leakage,
    })
    return result


@experiment("a-infty")
def run_a_infty(lab: Lab) -> ExperimentResult:
    result = ExperimentResult("a-infty")
    s = lab.scenario
    generations = s.generations or [s.boundary.generation]
    rows = []
    curves = []
    for k in generations:
        sub = lab.derive(boundary=dataclasses.replace(s.boundary, generation=k), depth=min(2 * k, s.depth))
        poles = sub.far_poles()
        measures = elliptic_measure_rows(sub.problem, sub.tree, poles, workers=s.workers, owner=sub.cache.owner)
        fit = fit_a_infty(measures)
        rows.append({"generation": k, "depth": sub.scenario.depth, "c_half": fit.c_at(A_INFTY_S), "c": fit.c,
                     "s": fit.s, "triples": fit.triples, "skipped": fit.skipped})
        curve = fit.curve.copy()
        curve.insert(0, "generation", k)
        curves.append(curve)
    table = pd.DataFrame(rows, columns=["generation", "depth", "c_half", "c", "s", "triples", "skipped"])
    values = table["c_half"].to_numpy()
    result.check(CheckResult.holds("constant nondecreasing in generation", bool(np.all(np.diff(values) >= 0)),
                                   f"C(1/2) per generation {np.round(values, 4).tolist()}"))
    if len(values) > 1:
        result.check(CheckResult.at_least("growth first to last generation", values[-1] / values[0], 2.0))
    result.curves["a_infty"] = Curve(table, "generation", ["c_half"], "A-infinity constant at s=1/2", "y")
    result.tables["a_infty_fits"] = pd.concat(curves, ignore_index=True) if curves else pd.DataFrame()
    return result


@experiment("approximator")
def run_approximator(lab: Lab) -> ExperimentResult:
    result = ExperimentResult("approximator")
    s = lab.scenario
    depths = s.depths or [s.depth]
    rows = []
    for depth in depths:
        sub = lab.derive(depth=depth)
        centers, radii = sub.carleson_balls()
        for eps in s.eps:
            run = approximate(sub.builder, sub.cache, sub.u, sub.top, eps, s.m)
            phi = run.approximator
            inside = np.full(sub.grid.n_cells, np.nan)
            inside[phi.cells] = sub.u.values[phi.cells]
            phi_norm = carleson_l1_norm(sub.grid, phi.values, centers, radii, region_of=phi.region_of)
            grad_norm = carleson_l1_norm(sub.grid, inside, centers, radii, mode="gradient")
            rows.append({"depth": depth, "eps": eps, "gap": phi.gap, "regions": phi.n_regions,
                         "phi_norm": phi_norm.norm, "jump": phi_norm.jump, "interior": phi_norm.interior,
                         "grad_norm": grad_norm.norm, "red": len(run.labels.red), "subregimes": len(run.subregimes)})
            result.check(CheckResult.at_most(f"gap at depth {depth}, eps {eps:g}", phi.gap, eps))
            if depth == depths[-1] and eps == s.eps[0]:
                result.fields["phi"] = phi.to_field()
                result.fields["u"] = sub.u
    table = pd.DataFrame(rows, columns=["depth", "eps", "gap", "regions", "phi_norm", "jump", "interior",
                                        "grad_norm", "red", "subregimes"])
    result.tables["approximator"] = table
    by_depth = table.groupby("depth", sort=True).agg(phi_norm=("phi_norm", "max"), grad_norm=("grad_norm", "max"))
    by_depth = by_depth.reset_index()
    if len(by_depth) > 1:
        first, last = by_depth.iloc[0], by_depth.iloc[-1]
        result.check(CheckResult.at_least("growth of the gradient norm", last["grad_norm"] / first["grad_norm"], 1.5))
        result.check(CheckResult.at_most("growth of the approximator norm",
                                         by_depth["phi_norm"].max() / first["phi_norm"], 2.0))
    result.curves["carleson_growth"] = Curve(by_depth, "depth", ["phi_norm", "grad_norm"], "L1 Carleson norms by depth", "y")
    return result


@experiment("packing")
def run_packing(lab: Lab) -> ExperimentResult:
    result = ExperimentResult("packing")
    s = lab.scenario
    tree = lab.tree
    u = lab.u
    scale = max(u.sup(), 1e-300)
    cme = cme_constant(lab.builder, lab.grid.to_field(u.values / scale, name="u"))
    rows = []
    for index, eps in enumerate(s.eps):
        run = approximate(lab.builder, lab.cache, u, lab.top, eps, s.m)
        packing = red_yellow_packing(tree, run.labels, run.decomposition)
        types = classify_and_pack(tree, run.subregimes, s.lam, eps)
        result.check(CheckResult.at_most(f"red packing at eps {eps:g}", packing.red_scaled, 100 * cme))
        result.check(CheckResult.holds(f"yellow packing at eps {eps:g}", packing.yellow_bound_holds,
                                       f"yellow {packing.yellow:.4g}, corona {packing.corona:.4g}"))
        result.check(CheckResult.at_most(f"subregime packing at eps {eps:g}", types.total_packing,
                                         50.0 / (s.lam * eps ** 2)))
        coherent = [check_coherence(tree, r.members, r.top).passed for r in run.decomposition.regimes]
        result.check(CheckResult.holds(f"regimes coherent at eps {eps:g}", all(coherent)))
        if tree.max_depth <= 6:
            red = run.labels.red
            fast, _ = carleson_packing_norm(tree, red)
            result.check(CheckResult.at_most(f"packing oracle at eps {eps:g}",
                                             abs(fast - brute_force_packing_norm(tree, red)), 1e-9 * max(fast, 1.0)))
        rows.append({"eps": eps, "red": packing.red, "red_scaled": packing.red_scaled, "yellow": packing.yellow,
                     "corona": packing.corona, "total": types.total_packing,
                     **{f"count_{t}": n for t, n in types.counts.items()},
                     **{f"shape_{t}": v for t, v in types.shapes.items()}})
        result.tables[f"decomposition_{index}"] = decomposition_table(tree, run.decomposition, run.labels, run.subregimes)
    result.tables["packing"] = pd.DataFrame(rows)
    result.summary.update({"cme": cme, "measure_rows": len(lab.cache)})
    return result


def constructed_type4(lab: Lab, top: int, eps: float):
    """
    A Type 4 subregime under `top`: the grandchildren are the stopping family,
    all of it stopped for deviation, with data ±ε/2 alternating on their shadows.
    """
    tree = lab.tree
    gens = tree.cubes["generation"].to_numpy()
    below = tree.descendants(top, include_self=False, max_generation=int(gens[top]) + 2)
    grandchildren = below[gens[below] == gens[top] + 2]
    if len(grandchildren) < 2:
        raise ParameterError(f"cube {top} has fewer than two grandchildren")
    grandchildren = grandchildren[np.argsort(tree.cubes["start"].to_numpy()[grandchildren], kind="stable")]
    values = np.zeros(len(tree.atoms))
    for k, q in enumerate(grandchildren):
        values[tree.cubes.at[q, "start"]:tree.cubes.at[q, "stop"]] = (eps / 2) * (-1) ** k
    empty = np.zeros(0, dtype=np.int64)
    members = np.sort(below[gens[below] == gens[top] + 1])
    sub = SubRegime(
        top=int(top), members=np.concatenate([[int(top)], members]).astype(np.int64),
        stopping=np.sort(grandchildren), classes={"R": empty, "SB": np.sort(grandchildren), "Y": empty, "U": empty},
        bottom=np.sort(grandchildren), kind="T4"
    )
    choose_truncation(tree, sub, lab.scenario.lam)
    return sub, atom_data(lab.problem, tree, values, lab.cache.owner)


@experiment("type4")
def run_type4(lab: Lab) -> ExperimentResult:
    result = ExperimentResult("type4")
    s = lab.scenario
    rows = []
    for eps in s.eps:
        sub, data = constructed_type4(lab, lab.top, eps)
        u = solve_dirichlet(lab.problem, data)
        report = type4_oscillation_experiment(lab.problem, lab.builder, sub, u.values, data, eps, s.lam)
        result.check(CheckResult.at_least(f"oscillation integral at eps {eps:g}", report.boundary_integral, 1e-4 * eps ** 2))
        result.check(CheckResult.holds(f"cover at eps {eps:g}", report.cover_passed,
                                       f"needed {report.cover_needed:.4g}, bound {report.cover_bound:.4g}"))
        result.check(CheckResult.at_most(f"leftover mass at eps {eps:g}", report.other_mass, 8 * s.lam))
        rows.append({"eps": eps, "truncation": report.truncation, "cells": report.cells,
                     "integral": report.boundary_integral, "energy_delta": report.energy_delta,
                     "energy_green": report.energy_green, "c3": report.c3, "omega_delta_star": report.omega_delta_star,
                     "cover_needed": report.cover_needed, "cover_bound": report.cover_bound,
                     "other_mass": report.other_mass, "per_cube_max": report.per_cube_max})
    result.tables["type4"] = pd.DataFrame(rows)
    return result


def cube_with_mass(tree: DyadicTree, cube_mass: np.ndarray, top: int, alpha: float) -> int:
    """Follow the heaviest child down from the top until the mass fraction drops below α."""
    q = int(top)
    total = cube_mass[top]
    while cube_mass[q] >= alpha * total:
        kids = tree.children(q)
        if len(kids) == 0:
            raise ParameterError(f"tree depth {tree.max_depth} cannot reach mass fraction {alpha:.3g}")
        q = int(kids[np.argmax(cube_mass[kids])])
    return q


@experiment("good-cover")
def run_good_cover(lab: Lab) -> ExperimentResult:
    result = ExperimentResult("good-cover")
    s = lab.scenario
    tree = lab.tree
    pole = lab.builder.corkscrews.loc[lab.top, ["X", "Y"]].to_numpy(dtype=float)
    measure = lab.cache.row(pole)
    rows = []
    for alpha in s.alphas:
        target = cube_with_mass(tree, measure.cube_mass, lab.top, alpha)
        cover = good_eps_cover(tree, measure, lab.top, [target], s.eps0)
        result.check(CheckResult.holds(f"cover conditions at alpha {alpha:.3g}", cover.passed,
                                       f"worst ratio {cover.worst_ratio:.4g}"))
        result.check(CheckResult.at_most(f"cover length at alpha {alpha:.3g}",
                                         abs(cover.k - cover.predicted_length), 2.0))
        rows.append({"alpha": alpha, "achieved_alpha": cover.alpha, "target": target, "k": cover.k,
                     "predicted": cover.predicted_length, "worst_ratio": cover.worst_ratio})
    result.tables["good_cover"] = pd.DataFrame(rows)

    cone_rows = []
    oscillations = []
    for k in (2, 3, 4):
        alpha = 0.9 * s.eps0 ** k
        target = cube_with_mass(tree, measure.cube_mass, lab.top, alpha)
        report = converse_experiment(lab.problem, lab.builder, lab.cache, lab.top, [target], s.eps0,
                                     lab.eps_approximator(0.5), eta=s.eta)
        cone_rows.append({"level": k, "k": report.cover.k, "integral": float(report.cones["integral"].mean()),
                          "ratio": report.ratio})
        oscillation = report.oscillation.copy()
        oscillation.insert(0, "experiment", k)
        oscillations.append(oscillation)
        result.check(CheckResult.holds(f"oscillation on every level for k={k}", report.every_level_oscillates))
    cones = pd.DataFrame(cone_rows, columns=["level", "k", "integral", "ratio"])
    per_level = cones["integral"] / cones["k"].clip(lower=1)
    result.check(CheckResult.at_most("cone integral linear in k", per_level.max() / per_level.min(), 1.5))
    result.curves["cone_integrals"] = Curve(cones, "k", ["integral"], "Cone integral by cover length")
    result.tables["oscillation"] = pd.concat(oscillations, ignore_index=True)
    return result


@experiment("varopoulos")
def run_varopoulos(lab: Lab) -> ExperimentResult:
    result = ExperimentResult("varopoulos")
    s = lab.scenario
    tree = lab.tree
    builder = lab.builder
    top = lab.top
    center = tree.centers()[top]
    radius = 0.25 * float(tree.cubes.at[top, "side"])
    delta = tree.surface_ball_atoms(center, radius)
    f = np.zeros(len(tree.atoms))
    f[delta] = 1.0
    bmo = bmo_norm_and_decompose(tree, f)
    centers, radii = lab.carleson_balls()
    series = iterate_extension(lab.problem, builder, bmo.bounded, top, lab.eps_approximator(0.5),
                               iterations=s.iterations, centers=centers, radii=radii, owner=lab.cache.owner)
    step = extend_step_part(builder, bmo.terms, centers, radii)
    atom_centers = tree.atoms.centers[delta]
    inner = delta[np.hypot(atom_centers[:, 0] - center[0], atom_centers[:, 1] - center[1]) <= radius / 2]
    picks = inner[np.linspace(0, len(inner) - 1, min(8, len(inner))).astype(np.int64)] if len(inner) else inner
    report = assemble_and_verify(builder, series, step, bmo, tree.atoms.centers[picks], centers, radii)
    result.check(CheckResult.at_most("trace error", report.trace_error, 0.1))
    result.check(CheckResult.at_most("gradient constant", report.c1, 100.0))
    result.check(CheckResult.at_most("Carleson constant", report.c2, 100.0))
    table = series.table
    if not table.empty:
        f0 = float(table["f_sup"].iloc[0])
        early = table.loc[table["k"] <= 5]
        ratio = (early["f_sup"] / (f0 * 2.0 ** -early["k"])).to_numpy()
        result.check(CheckResult.at_most("per-iteration decay", float(ratio.max()), 4.0))
    combined, separate = subadditivity_check(series, lab.grid, centers, radii)
    result.check(CheckResult.at_most("Carleson subadditivity", combined, separate * (1 + 1e-9) + 1e-12))
    g1 = extend_data(lab.problem, lambda p: np.sin(3.0 * p[:, 0]))
    g2 = extend_data(lab.problem, lambda p: np.cos(2.0 * p[:, 0]))
    result.check(CheckResult.at_most("linearity", linearity_check(lab.problem, g1, g2), 1e-8))
    result.tables["iterations"] = table
    result.tables["trace"] = report.trace_table
    result.tables["bmo_terms"] = bmo.terms
    result.summary.update({"bmo_norm": bmo.norm, "tail": series.tail, "aborted": series.aborted,
                           "gradient_bound": report.gradient_bound, "carleson": report.carleson})
    return result


@experiment("comparison")
def run_comparison(lab: Lab) -> ExperimentResult:
    result = ExperimentResult("comparison")
    s = lab.scenario
    poles = lab.sample_poles(COMPARISON_POLES)
    generation = s.generations[0] if s.generations else min(3, s.depth)
    report = comparison_test_eq1(lab.grid, lab.tree, lab.coefficients, poles, generation,
                                 method=s.solver, workers=s.workers)
    result.check(CheckResult.holds("sup ratio finite", bool(np.isfinite(report.sup_ratio)), f"sup {report.sup_ratio:.4g}"))
    if s.coefficients.type == "identity":
        result.check(CheckResult.at_most("ratio identically one",
                                         max(abs(report.sup_ratio - 1), abs(report.inf_ratio - 1)), 1e-6))
    cubes = lab.sample_cubes(MEASURE_CUBES)
    bounds = corkscrew_density_bound(lab.builder, lab.cache, cubes)
    result.tables["comparison"] = report.table
    result.tables["density_bound"] = bounds
    result.summary.update({"sup_ratio": report.sup_ratio, "inf_ratio": report.inf_ratio, "poles": len(report.poles),
                           "max_density_bound": float(bounds["bound"].max()) if len(bounds) else float("nan"),
                           **report.notes})
    return result


def _run_one(name: str, lab: Lab) -> ExperimentResult:
    started = time.perf_counter()
    try:
        result = REGISTRY[name](lab)
    except LabError as err:
        logger.error("experiment %s failed: %s", name, err)
        result = ExperimentResult(name)
        result.check(CheckResult.holds("completed", False, f"{type(err).__name__}: {err} {err.details or ''}".strip()))
    result.seconds = time.perf_counter() - started
    logger.info("experiment %s %s in %.1fs", name, "passed" if result.passed else "FAILED", result.seconds)
    return result


def _write_experiment(out_dir: Path, result: ExperimentResult) -> None:
    folder = out_dir / result.name
    for name, table in result.tables.items():
        write_table(folder / f"{name}.csv", table)
    for name, curve in result.curves.items():
        path = write_table(folder / f"{name}.csv", curve.frame)
        write_plot_script(path, curve.x, curve.columns, curve.title, curve.logscale)
    for name, field_ in result.fields.items():
        write_grid(folder / f"{name}.bin", field_.grid, field_.values)
    write_json(folder / "report.json", result.to_report())


def run_scenario(
    scenario: Scenario,
    out_dir: Optional[PathLike] = None,
    experiments: Optional[Sequence[str]] = None,
    checks_only: bool = False
) -> RunResult:
    """
    Run the experiments of a scenario and write its artifact directory.

    Args:
        scenario: A validated scenario.
        out_dir: Artifact directory, default <artifact root>/<scenario name>.
        experiments: Subset to run, default the scenario's list.
        checks_only: Write only the manifest and the failure list.

    Returns:
        The RunResult; `passed` decides the exit code.
    """
    names = list(experiments) if experiments is not None else list(scenario.experiments)
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise ParameterError(f"unknown experiments {unknown}")
    out = Path(out_dir) if out_dir is not None else Path(Config.ARTIFACT_ROOT) / scenario.name
    lab = Lab(scenario)
    logger.info("scenario %s: %s", scenario.name, ", ".join(names))
    results = [_run_one(name, lab) for name in names]
    run = RunResult(scenario=scenario, out_dir=out, experiments=results)
    out.mkdir(parents=True, exist_ok=True)
    if not checks_only:
        for result in results:
            _write_experiment(out, result)
    write_json(out / "scenario.json", normalized_document(scenario))
    write_json(out / "manifest.json", run.manifest())
    failures = out / "failures.json"
    if run.passed:
        if failures.exists():
            failures.unlink()
    else:
        write_json(failures, run.failures)
    logger.info("scenario %s %s: %d checks, %d failed", scenario.name, "passed" if run.passed else "FAILED",
                sum(len(r.checks) for r in results), len(run.failures))
    return run


def report_directory(path: PathLike) -> pd.DataFrame:
    """One row per check of a run directory, or one row per run below an artifact root."""
    path = Path(path)
    manifest = load_manifest(path)
    if manifest is None:
        runs = list_runs(path)
        if runs.empty:
            raise ParameterError(f"{path} holds no run manifest")
        return runs
    columns = ["experiment", "name", "passed", "value", "bound", "detail"]
    return pd.DataFrame(manifest.get("checks", []), columns=columns)
