import logging
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.csgraph import breadth_first_order
from scipy.spatial import cKDTree

from labutils.boundary_util import BoundarySet, box_box_distance, point_box_distance
from labutils.dyadic_util import DyadicTree
from labutils.error_util import GeometryError, ParameterError
from labutils.grid_util import DomainGrid

logger = logging.getLogger(__name__)

REGION_MODES = ("plain", "star", "starstar")
DEFAULT_TAU = 0.125
THETA_CANDIDATES = tuple(2.0 ** -k for k in range(1, 9))
STENCIL_RADII = (0.2, 0.35, 0.5, 0.65, 0.8)
STENCIL_ANGLES = 32
XI_SAMPLES = 33


@dataclass
class WhitneyComplex:
    """Whitney squares aligned with the grid, their adjacency and cell ownership."""
    grid: DomainGrid
    squares: pd.DataFrame
    adjacency: sp.csr_matrix
    cell_owner: np.ndarray
    min_side: float

    def __len__(self) -> int:
        return len(self.squares)

    @cached_property
    def boxes(self) -> np.ndarray:
        s = self.squares
        return np.column_stack([s["x0"], s["y0"], s["x0"] + s["side"], s["y0"] + s["side"]]) if len(s) else np.zeros((0, 4))

    @cached_property
    def center_tree(self) -> Optional[cKDTree]:
        if not len(self.squares):
            return None
        b = self.boxes
        return cKDTree(np.column_stack([0.5 * (b[:, 0] + b[:, 2]), 0.5 * (b[:, 1] + b[:, 3])]))

    @property
    def max_side(self) -> float:
        return float(self.squares["side"].max()) if len(self.squares) else 0.0

    def dilated(self, ids: np.ndarray, dilation: float) -> np.ndarray:
        b = self.boxes[ids]
        half = 0.5 * dilation * (b[:, 2] - b[:, 0])
        cx = 0.5 * (b[:, 0] + b[:, 2])
        cy = 0.5 * (b[:, 1] + b[:, 3])
        return np.column_stack([cx - half, cy - half, cx + half, cy + half])

    def rasterize(self, ids: Iterable[int], dilation: float) -> np.ndarray:
        """Ω cells whose centers lie in the open union of the dilated squares."""
        ids = np.asarray(list(ids), dtype=np.int64)
        if len(ids) == 0:
            return np.zeros(0, dtype=np.int64)
        grid = self.grid
        boxes = self.dilated(ids, dilation)
        chunks = []
        for bx0, by0, bx1, by1 in boxes:
            i0 = max(int(np.floor((bx0 - grid.box.x0) / grid.h - 0.5)) + 1, 0)
            i1 = min(int(np.ceil((bx1 - grid.box.x0) / grid.h - 0.5)) - 1, grid.nx - 1)
            j0 = max(int(np.floor((by0 - grid.box.y0) / grid.h - 0.5)) + 1, 0)
            j1 = min(int(np.ceil((by1 - grid.box.y0) / grid.h - 0.5)) - 1, grid.ny - 1)
            if i0 > i1 or j0 > j1:
                continue
            block = grid.cell_index[j0:j1 + 1, i0:i1 + 1].ravel()
            chunks.append(block[block >= 0])
        return np.unique(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=np.int64)

    def contains(self, ids: np.ndarray, dilation: float, points: np.ndarray) -> np.ndarray:
        """Exact membership of points in the open union of dilated squares."""
        points = np.atleast_2d(points)
        result = np.zeros(len(points), dtype=bool)
        if len(ids) == 0:
            return result
        boxes = self.dilated(np.asarray(ids, dtype=np.int64), dilation)
        for k in range(0, len(boxes), 256):
            b = boxes[k:k + 256]
            inside = (
                (points[:, None, 0] > b[None, :, 0]) & (points[:, None, 0] < b[None, :, 2])
                & (points[:, None, 1] > b[None, :, 1]) & (points[:, None, 1] < b[None, :, 3])
            )
            result |= inside.any(axis=1)
        return result

    def square_of_point(self, points: np.ndarray) -> np.ndarray:
        """Whitney square holding each point (closed squares, lowest id), -1 if none."""
        points = np.atleast_2d(points)
        result = np.full(len(points), -1, dtype=np.int64)
        if self.center_tree is None:
            return result
        lists = self.center_tree.query_ball_point(points, self.max_side * np.sqrt(0.5) + 1e-12)
        for k, candidates in enumerate(lists):
            if not candidates:
                continue
            c = np.sort(np.asarray(candidates, dtype=np.int64))
            b = self.boxes[c]
            inside = (points[k, 0] >= b[:, 0]) & (points[k, 0] <= b[:, 2]) & (points[k, 1] >= b[:, 1]) & (points[k, 1] <= b[:, 3])
            if inside.any():
                result[k] = c[np.argmax(inside)]
        return result

    def to_frame(self) -> pd.DataFrame:
        return self.squares.reset_index(drop=True)


def whitney_decompose(grid: DomainGrid, boundary: Optional[BoundarySet] = None) -> WhitneyComplex:
    """
    Grid-aligned Whitney squares of the truncated domain.

    A square is accepted once 4·diam(I) ≤ dist(4I, Σ), with distances taken
    from the exact piece list. Squares that would be smaller than one cell
    (side below h) are dropped, so the squares tile only the part of Ω with
    δ ≳ h, not all of Ω. Cells left uncovered have cell_owner -1.

    Args:
        grid: The domain grid.
        boundary: Boundary the grid was built from; a mismatch is an error.

    Returns:
        The WhitneyComplex.
    """
    boundary = boundary or grid.boundary
    if boundary is not grid.boundary:
        raise GeometryError("grid was built from a different boundary")
    started = time.perf_counter()
    oracle = boundary.oracle
    h = grid.h
    empty = pd.DataFrame({"id": np.zeros(0, dtype=np.int64), "x0": [], "y0": [], "side": [], "dist": []})
    if grid.n_cells == 0:
        return WhitneyComplex(grid, empty, sp.csr_matrix((0, 0)), np.zeros(0, dtype=np.int64), h)
    m = 0
    while (grid.nx % 2 ** (m + 1) == 0 and grid.ny % 2 ** (m + 1) == 0 and h * 2 ** (m + 1) <= 1.0 + 1e-12):
        m += 1
    root = h * 2 ** m
    ii, jj = np.meshgrid(np.arange(grid.nx // 2 ** m), np.arange(grid.ny // 2 ** m))
    pending = np.column_stack([grid.box.x0 + ii.ravel() * root, grid.box.y0 + jj.ravel() * root, np.full(ii.size, root)])
    accepted = []
    while len(pending):
        s = pending[:, 2]
        boxes = np.column_stack([pending[:, 0], pending[:, 1], pending[:, 0] + s, pending[:, 1] + s])
        four = np.column_stack([pending[:, 0] - 1.5 * s, pending[:, 1] - 1.5 * s, pending[:, 0] + 2.5 * s, pending[:, 1] + 2.5 * s])
        dist4 = oracle.box_distance(four)
        ok = 4 * np.sqrt(2) * s <= dist4
        if np.any(ok):
            centers = np.column_stack([pending[ok, 0] + 0.5 * s[ok], pending[ok, 1] + 0.5 * s[ok]])
            keep = ~boundary.is_excluded(centers)
            accepted.append(np.column_stack([boxes[ok][keep, :2], s[ok][keep]]))
        split = ~ok & (s / 2 >= h * (1 - 1e-9))
        parents = pending[split]
        half = parents[:, 2] / 2
        pending = np.concatenate([
            np.column_stack([parents[:, 0] + dx * half, parents[:, 1] + dy * half, half])
            for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1))
        ]) if len(parents) else np.zeros((0, 3))
    table = np.concatenate(accepted) if accepted else np.zeros((0, 3))
    order = np.lexsort((table[:, 0], table[:, 1], -table[:, 2])) if len(table) else np.zeros(0, dtype=np.int64)
    table = table[order]
    boxes = np.column_stack([table[:, 0], table[:, 1], table[:, 0] + table[:, 2], table[:, 1] + table[:, 2]])
    squares = pd.DataFrame({
        "id": np.arange(len(table)), "x0": table[:, 0], "y0": table[:, 1], "side": table[:, 2],
        "dist": oracle.box_distance(boxes) if len(table) else np.zeros(0)
    })

    adjacency = _touching_graph(boxes)
    owner = np.full(grid.n_cells, -1, dtype=np.int64)
    for k, (x0, y0, side) in enumerate(table):
        i0 = int(round((x0 - grid.box.x0) / h))
        j0 = int(round((y0 - grid.box.y0) / h))
        n = int(round(side / h))
        block = grid.cell_index[j0:j0 + n, i0:i0 + n]
        owner[block[block >= 0]] = k
    complex_ = WhitneyComplex(grid=grid, squares=squares, adjacency=adjacency, cell_owner=owner, min_side=h)
    logger.info("Whitney decomposition: %d squares (sides %.4g..%.4g) in %.2fs", len(squares),
                table[:, 2].min() if len(table) else 0, table[:, 2].max() if len(table) else 0,
                time.perf_counter() - started)
    return complex_


def _touching_graph(boxes: np.ndarray) -> sp.csr_matrix:
    n = len(boxes)
    if n == 0:
        return sp.csr_matrix((0, 0))
    centers = np.column_stack([0.5 * (boxes[:, 0] + boxes[:, 2]), 0.5 * (boxes[:, 1] + boxes[:, 3])])
    sides = boxes[:, 2] - boxes[:, 0]
    tree = cKDTree(centers)
    pairs = tree.query_pairs(float(sides.max()) * np.sqrt(2) + 1e-9, output_type="ndarray")
    if len(pairs) == 0:
        return sp.csr_matrix((n, n))
    gap = box_box_distance(boxes[pairs[:, 0]], boxes[pairs[:, 1]])
    touching = pairs[gap <= 1e-12 * max(float(sides.max()), 1.0)]
    data = np.ones(2 * len(touching))
    rows = np.concatenate([touching[:, 0], touching[:, 1]])
    cols = np.concatenate([touching[:, 1], touching[:, 0]])
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


@dataclass
class WhitneyReport:
    n_squares: int
    lower_violations: int
    upper_violations: int
    ratio_violations: int
    max_side_ratio: float

    @property
    def passed(self) -> bool:
        return self.lower_violations == 0 and self.upper_violations == 0 and self.ratio_violations == 0


def check_whitney(complex_: WhitneyComplex) -> WhitneyReport:
    """Both Whitney inequalities and the neighbor side ratio, for every square."""
    oracle = complex_.grid.boundary.oracle
    s = complex_.squares["side"].to_numpy()
    diam = np.sqrt(2) * s
    b = complex_.boxes
    four = np.column_stack([b[:, 0] - 1.5 * s, b[:, 1] - 1.5 * s, b[:, 2] + 1.5 * s, b[:, 3] + 1.5 * s])
    dist4 = oracle.box_distance(four) if len(b) else np.zeros(0)
    dist = complex_.squares["dist"].to_numpy()
    lower = int(np.sum(4 * diam > dist4 * (1 + 1e-12)))
    upper = int(np.sum((dist4 > dist * (1 + 1e-12)) | (dist > 40 * diam)))
    coo = complex_.adjacency.tocoo()
    ratio = s[coo.row] / s[coo.col] if coo.nnz else np.ones(1)
    report = WhitneyReport(
        n_squares=len(s), lower_violations=lower, upper_violations=upper,
        ratio_violations=int(np.sum((ratio > 4) | (ratio < 0.25))), max_side_ratio=float(ratio.max())
    )
    if not report.passed:
        logger.warning("Whitney check: %d lower, %d upper, %d ratio violations", lower, upper, report.ratio_violations)
    return report


def compute_corkscrews(tree: DyadicTree, grid: DomainGrid, c_cs: Optional[float] = None) -> pd.DataFrame:
    """
    Corkscrew data for every cube: X_Q maximizing min(δ(X), r_Q - |X - x_Q|)
    over a polar stencil in B(x_Q, r_Q), the touching point x̂_Q and the
    radius of Δ̂_Q.
    """
    c_cs = c_cs if c_cs is not None else tree.a0 / 4
    boundary = tree.boundary
    centers = tree.centers()
    r = c_cs * tree.sides()
    angles = 2 * np.pi * (np.arange(STENCIL_ANGLES) + 0.5) / STENCIL_ANGLES
    offsets = np.array([(f * np.cos(a), f * np.sin(a)) for f in STENCIL_RADII for a in angles])
    points = centers[:, None, :] + r[:, None, None] * offsets[None, :, :]
    flat = points.reshape(-1, 2)
    delta = boundary.oracle.distance(flat)
    valid = boundary.in_domain(flat) & grid.box.contains(flat)
    reach = r[:, None] - np.hypot(points[..., 0] - centers[:, None, 0], points[..., 1] - centers[:, None, 1])
    score = np.where(valid.reshape(points.shape[:2]), np.minimum(delta.reshape(points.shape[:2]), reach), -np.inf)
    best = np.argmax(score, axis=1)
    rows = np.arange(len(centers))
    X = points[rows, best]
    gamma = score[rows, best] / r
    delta_x, hat = boundary.oracle.nearest(X)
    frame = pd.DataFrame({
        "X": X[:, 0], "Y": X[:, 1], "r": r, "gamma": gamma, "delta": delta_x,
        "hat_x": hat[:, 0], "hat_y": hat[:, 1], "hat_radius": tree.a0 * tree.sides() - 2 * r,
        "cell": grid.locate(X)
    })
    frame.loc[~np.isfinite(frame["gamma"]), ["gamma"]] = 0.0
    unresolved = int((frame["gamma"] <= 0).sum())
    if unresolved:
        logger.warning("%d cubes have no corkscrew point on the stencil", unresolved)
    return frame


@dataclass
class WhitneyRegion:
    cube: int
    mode: str
    fatness: float
    dilation: float
    members: np.ndarray
    cells: np.ndarray
    k1: float = float("nan")


class RegionBuilder:
    """
    Whitney regions U_Q, U*_Q, U**_Q of every cube of a tree, built lazily and
    cached. Members are 𝒲_Q(K) augmented by shortest Whitney-graph paths to the
    square holding X_Q and by the squares meeting B(X_Q, δ(X_Q)/2).
    """

    def __init__(
        self,
        tree: DyadicTree,
        complex_: WhitneyComplex,
        k0: float = 4.0,
        tau: float = DEFAULT_TAU,
        kappa: Optional[float] = None,
        theta0: float = 0.125,
        kappa_factor: float = 8.0,
        corkscrews: Optional[pd.DataFrame] = None
    ):
        if k0 < 1 or tau <= 0 or tau >= 0.5:
            raise ParameterError("need K0 >= 1 and 0 < τ < 1/2")
        self.tree = tree
        self.complex = complex_
        self.grid = complex_.grid
        self.k0 = float(k0)
        self.tau = float(tau)
        self.kappa = float(kappa) if kappa is not None else kappa_factor * max(k0, 1.0 / theta0)
        self.theta0 = theta0
        self.corkscrews = corkscrews if corkscrews is not None else compute_corkscrews(tree, complex_.grid)
        self._members: Dict[Tuple[int, float], np.ndarray] = {}
        self._cells: Dict[Tuple[int, str], np.ndarray] = {}
        self._proxies = self._build_proxies()
        self._square_of_corkscrew = complex_.square_of_point(self.corkscrews[["X", "Y"]].to_numpy())

    def _build_proxies(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        tree = self.tree
        cubes = tree.cubes
        gens = cubes["generation"].to_numpy()
        starts = cubes["start"].to_numpy()
        stops = cubes["stop"].to_numpy()
        centers = tree.centers()
        outer = cubes["outer"].to_numpy()
        proxies = []
        for q in range(len(cubes)):
            g = min(gens[q] + 4, tree.max_depth)
            sel = (gens == g) & (starts >= starts[q]) & (stops <= stops[q])
            proxies.append((centers[sel], outer[sel]))
        return proxies

    def dilation(self, mode: str) -> float:
        if mode not in REGION_MODES:
            raise ParameterError(f"unknown region mode {mode!r}")
        return 1 + 2 * self.tau if mode == "starstar" else 1 + self.tau

    def fatness(self, mode: str) -> float:
        return self.k0 if mode == "plain" else self.kappa

    def distance_to_cube(self, q: int, boxes: np.ndarray) -> np.ndarray:
        """Lower bound for dist(I, Q) from proxy balls around descendants."""
        centers, radii = self._proxies[q]
        best = np.full(len(boxes), np.inf)
        for c, rad in zip(centers, radii):
            d, _ = point_box_distance(np.repeat(c[None, :], len(boxes), axis=0), boxes)
            best = np.minimum(best, np.maximum(d - rad, 0.0))
        return best

    def selection(self, q: int, fatness: float) -> np.ndarray:
        """𝒲_Q(K) before augmentation."""
        complex_ = self.complex
        if complex_.center_tree is None:
            return np.zeros(0, dtype=np.int64)
        side = float(self.tree.cubes.at[q, "side"])
        x = self.tree.centers()[q]
        reach = fatness * side + float(self.tree.cubes.at[q, "outer"]) + complex_.max_side
        candidates = np.sort(np.asarray(complex_.center_tree.query_ball_point(x, reach), dtype=np.int64))
        if len(candidates) == 0:
            return candidates
        s = complex_.squares["side"].to_numpy()[candidates]
        ok = (s / fatness <= side * (1 + 1e-12)) & (side <= fatness * s * (1 + 1e-12))
        candidates = candidates[ok]
        d = self.distance_to_cube(q, complex_.boxes[candidates])
        return candidates[d <= fatness * side * (1 + 1e-12)]

    def members(self, q: int, fatness: float) -> np.ndarray:
        key = (int(q), float(fatness))
        if key in self._members:
            return self._members[key]
        complex_ = self.complex
        selected = self.selection(q, fatness)
        root = int(self._square_of_corkscrew[q])
        if root < 0:
            self._members[key] = selected
            return selected
        X = self.corkscrews.loc[q, ["X", "Y"]].to_numpy(dtype=float)
        ball = self._ball_squares(X, 0.5 * float(self.corkscrews.at[q, "delta"]))
        side = float(self.tree.cubes.at[q, "side"])
        window_radius = (2 * self.kappa + 4) * side + float(self.tree.cubes.at[q, "outer"]) + 2 * complex_.max_side
        window = np.sort(np.unique(np.concatenate([
            np.asarray(complex_.center_tree.query_ball_point(X, window_radius), dtype=np.int64), selected, [root]
        ])))
        local = {int(w): k for k, w in enumerate(window)}
        sub = complex_.adjacency[window][:, window]
        _, predecessors = breadth_first_order(sub, local[root], directed=False, return_predecessors=True)
        chosen = set(int(s) for s in selected) | set(int(s) for s in ball) | {root}
        for m in selected:
            node = local[int(m)]
            while node >= 0 and node != local[root]:
                chosen.add(int(window[node]))
                node = predecessors[node]
        result = np.array(sorted(chosen), dtype=np.int64)
        self._members[key] = result
        return result

    def _ball_squares(self, center: np.ndarray, radius: float) -> np.ndarray:
        complex_ = self.complex
        candidates = np.asarray(
            complex_.center_tree.query_ball_point(center, radius + complex_.max_side * np.sqrt(0.5)), dtype=np.int64
        )
        if len(candidates) == 0:
            return candidates
        d, _ = point_box_distance(np.repeat(center[None, :], len(candidates), axis=0), complex_.boxes[candidates])
        return candidates[d < radius]

    def region_members(self, q: int, mode: str) -> np.ndarray:
        return self.members(q, self.fatness(mode))

    def cells(self, q: int, mode: str = "plain") -> np.ndarray:
        key = (int(q), mode)
        if key not in self._cells:
            self._cells[key] = self.complex.rasterize(self.region_members(q, mode), self.dilation(mode))
        return self._cells[key]

    def contains(self, q: int, mode: str, points: np.ndarray) -> np.ndarray:
        return self.complex.contains(self.region_members(q, mode), self.dilation(mode), points)

    def union_cells(self, cubes: Iterable[int], mode: str = "plain") -> np.ndarray:
        chunks = [self.cells(q, mode) for q in cubes]
        return np.unique(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=np.int64)


def build_region(builder: RegionBuilder, q: int, mode: str = "plain", fatness: Optional[float] = None, tau: Optional[float] = None) -> WhitneyRegion:
    """
    One Whitney region with its realized K₁.

    Args:
        builder: The region builder.
        q: Cube id.
        mode: "plain", "star" or "starstar".
        fatness: K overriding the mode's K₀ or κ.
        tau: τ overriding the builder's value.

    Returns:
        The WhitneyRegion; K₁ is the largest of ℓ(Q)/δ(X), δ(X)/ℓ(Q) and
        dist(X, Q)/ℓ(Q) over the region's cells.
    """
    fatness = builder.fatness(mode) if fatness is None else float(fatness)
    if fatness < builder.k0 * (1 - 1e-12):
        raise ParameterError(f"K={fatness} is below K0={builder.k0}")
    tau = builder.tau if tau is None else float(tau)
    dilation = 1 + 2 * tau if mode == "starstar" else 1 + tau
    if int(builder._square_of_corkscrew[q]) < 0:
        raise GeometryError(f"corkscrew of cube {q} lies in no Whitney square", {"cube": int(q)})
    members = builder.members(q, fatness)
    cells = builder.complex.rasterize(members, dilation)
    grid = builder.grid
    side = float(builder.tree.cubes.at[q, "side"])
    k1 = float("nan")
    if len(cells):
        delta = grid.delta[cells]
        centers, radii = builder._proxies[q]
        points = grid.centers[cells]
        dist_q = np.full(len(cells), np.inf)
        for c, rad in zip(centers, radii):
            dist_q = np.minimum(dist_q, np.hypot(points[:, 0] - c[0], points[:, 1] - c[1]) + rad)
        k1 = float(np.max(np.maximum.reduce([side / delta, delta / side, dist_q / side])))
    return WhitneyRegion(cube=int(q), mode=mode, fatness=fatness, dilation=dilation, members=members, cells=cells, k1=k1)


@dataclass
class SawtoothRegion:
    top: int
    stopping: List[int]
    members: np.ndarray
    cells: np.ndarray
    mask: np.ndarray
    fattened: bool
    connected: bool
    n_components: int


def sawtooth_members(tree: DyadicTree, top: int, stopping: Sequence[int]) -> np.ndarray:
    """𝔻_{𝓕,Q₀}: descendants of Q₀ not contained in any cube of 𝓕."""
    stopping = [int(f) for f in stopping]
    cubes = tree.cubes
    for f in stopping:
        if not tree.contains(top, f):
            raise ParameterError(f"stopping cube {f} is not inside the top cube {top}")
    for a_index, a in enumerate(stopping):
        for b in stopping[a_index + 1:]:
            if tree.contains(a, b) or tree.contains(b, a):
                raise ParameterError(f"stopping cubes {a} and {b} overlap")
    members = tree.descendants(top)
    if not stopping:
        return members
    gens = cubes["generation"].to_numpy()[members]
    starts = cubes["start"].to_numpy()[members]
    stops = cubes["stop"].to_numpy()[members]
    keep = np.ones(len(members), dtype=bool)
    for f in stopping:
        row = cubes.loc[f]
        keep &= ~((gens >= row["generation"]) & (starts >= row["start"]) & (stops <= row["stop"]))
    return members[keep]


def build_sawtooth(builder: RegionBuilder, top: int, stopping: Sequence[int] = (), fattened: bool = False) -> SawtoothRegion:
    """
    The sawtooth Ω_{𝓕,Q₀} (or Ω*_{𝓕,Q₀} when fattened) as a set of Ω cells.
    With 𝓕 empty this is the Carleson box T_{Q₀}.
    """
    members = sawtooth_members(builder.tree, top, stopping)
    mode = "star" if fattened else "plain"
    cells = builder.union_cells(members, mode)
    mask = builder.grid.submask(cells)
    _, n_components = ndimage.label(mask)
    return SawtoothRegion(
        top=int(top), stopping=[int(f) for f in stopping], members=members, cells=cells,
        mask=mask, fattened=fattened, connected=n_components <= 1, n_components=int(n_components)
    )


def carleson_box(builder: RegionBuilder, q: int, mode: str = "plain") -> np.ndarray:
    """Cells of T_Q, T*_Q or T**_Q."""
    return builder.union_cells(builder.tree.descendants(q), mode)


def cubes_containing(tree: DyadicTree, point: Sequence[float], top: Optional[int] = None) -> np.ndarray:
    """Cubes of 𝔻_{Q₀} holding the atom nearest to a boundary point, coarsest first."""
    atom, _ = tree.locate(np.asarray(point, dtype=float)[None, :])
    cubes = tree.cubes
    ids = np.flatnonzero((cubes["start"].to_numpy() <= atom[0]) & (cubes["stop"].to_numpy() > atom[0]))
    if top is not None:
        ids = ids[[tree.contains(top, int(q)) for q in ids]]
    return ids[np.argsort(cubes["generation"].to_numpy()[ids], kind="stable")]


def dyadic_cone(builder: RegionBuilder, point: Sequence[float], top: int, mode: str = "plain") -> np.ndarray:
    """Γ_{Q₀}(x) as Ω cells."""
    return builder.union_cells(cubes_containing(builder.tree, point, top), mode)


def wide_region(builder: RegionBuilder, q: int, eta: float, mode: str = "plain") -> np.ndarray:
    """U_{Q,η³}: union of U_{Q'} over Q' ⊆ Q with ℓ(Q') > η³ℓ(Q)."""
    side = float(builder.tree.cubes.at[q, "side"])
    descendants = builder.tree.descendants(q)
    keep = builder.tree.cubes["side"].to_numpy()[descendants] > eta ** 3 * side
    return builder.union_cells(descendants[keep], mode)


def wide_cone(builder: RegionBuilder, point: Sequence[float], top: int, eta: float) -> np.ndarray:
    """Γ^η_{Q₀}(x) as Ω cells."""
    chunks = [wide_region(builder, int(q), eta) for q in cubes_containing(builder.tree, point, top)]
    return np.unique(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=np.int64)


@dataclass
class ApertureBounds:
    m1: float
    m2: float
    scale_window: Tuple[float, float]

    @property
    def ratio(self) -> float:
        return self.m2 / self.m1 if self.m1 > 0 else float("inf")


def cone_aperture_bounds(builder: RegionBuilder, point: Sequence[float], top: int) -> ApertureBounds:
    """
    Apertures m₁ < m₂ with Γ̃^{m₁}(x) ⊆ Γ_{Q₀}(x) ⊆ Γ̃^{m₂}(x) inside the
    window of distances that the grid and the tree both resolve.
    """
    grid = builder.grid
    tree = builder.tree
    cone = dyadic_cone(builder, point, top)
    x = np.asarray(point, dtype=float)
    distance = np.hypot(grid.centers[:, 0] - x[0], grid.centers[:, 1] - x[1])
    aperture = distance / np.maximum(grid.delta, 1e-300) - 1
    deepest = float(tree.cubes["side"].min())
    lo = max(4 * deepest, 16 * grid.h)
    hi = 0.5 * float(tree.cubes.at[top, "side"])
    window = (distance >= lo) & (distance <= hi)
    in_cone = np.zeros(grid.n_cells, dtype=bool)
    in_cone[cone] = True
    m2 = float(aperture[in_cone & window].max()) if np.any(in_cone & window) else float("inf")
    outside = window & ~in_cone
    m1 = float(aperture[outside].min()) if np.any(outside) else m2
    return ApertureBounds(m1=max(m1, 0.0), m2=m2, scale_window=(lo, hi))


@dataclass
class OverlapReport:
    max_multiplicity: int
    area_ratio: float
    n_regions: int


def region_overlap(builder: RegionBuilder, cubes: Optional[Iterable[int]] = None, mode: str = "starstar") -> OverlapReport:
    cubes = list(range(len(builder.tree.cubes))) if cubes is None else list(cubes)
    counts = np.zeros(builder.grid.n_cells, dtype=np.int64)
    total = 0
    for q in cubes:
        cells = builder.cells(q, mode)
        counts[cells] += 1
        total += len(cells)
    union = int(np.sum(counts > 0))
    return OverlapReport(
        max_multiplicity=int(counts.max()) if len(counts) else 0,
        area_ratio=total / union if union else 1.0,
        n_regions=len(cubes)
    )


@dataclass
class CoverageReport:
    k0: float
    uncovered_cells: int
    tested_cells: int
    ball_failures: List[int] = field(default_factory=list)
    child_failures: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.uncovered_cells == 0 and not self.ball_failures and not self.child_failures


def check_region_coverage(
    builder: RegionBuilder,
    min_delta: Optional[float] = None,
    children: bool = True
) -> CoverageReport:
    """
    Coverage by the regions U_Q (every Ω cell with δ ≥ min_delta lies in some
    U_Q) and the ball condition: B(X_Q, δ(X_Q)/2) ⊆ ∪𝒲_Q(K₀), and with
    `children` also B(X_Q', δ(X_Q')/2) ⊆ ∪𝒲_Q(K₀) for every child Q' of Q.

    Cubes whose corkscrew is not resolved by the grid are skipped on either
    side of the inclusion.
    """
    tree = builder.tree
    grid = builder.grid
    min_delta = min_delta if min_delta is not None else 16 * 2.0 ** -tree.max_depth
    covered = np.zeros(grid.n_cells, dtype=bool)
    for q in range(len(tree.cubes)):
        covered[builder.cells(q, "plain")] = True
    tested = grid.delta >= min_delta
    resolved = np.asarray(builder._square_of_corkscrew) >= 0
    points = builder.corkscrews[["X", "Y"]].to_numpy(dtype=float)
    deltas = builder.corkscrews["delta"].to_numpy(dtype=float)
    failures: List[int] = []
    child_failures: List[Tuple[int, int]] = []
    for q in range(len(tree.cubes)):
        if not resolved[q]:
            continue
        selected = builder.selection(q, builder.k0)
        if not np.all(np.isin(builder._ball_squares(points[q], 0.5 * deltas[q]), selected)):
            failures.append(int(q))
        if not children:
            continue
        for child in tree.children(q):
            child = int(child)
            if resolved[child] and not np.all(np.isin(builder._ball_squares(points[child], 0.5 * deltas[child]), selected)):
                child_failures.append((int(q), child))
    if child_failures:
        logger.debug("K0=%g: %d child balls outside their parent selection", builder.k0, len(child_failures))
    return CoverageReport(
        k0=builder.k0, uncovered_cells=int(np.sum(tested & ~covered)),
        tested_cells=int(tested.sum()), ball_failures=failures, child_failures=child_failures
    )


def smallest_k0(
    tree: DyadicTree,
    complex_: WhitneyComplex,
    candidates: Sequence[float] = (2, 4, 8, 16, 32),
    tau: float = DEFAULT_TAU,
    min_delta: Optional[float] = None,
    corkscrews: Optional[pd.DataFrame] = None,
    children: bool = True
) -> Tuple[float, CoverageReport]:
    """Smallest candidate K₀ passing the coverage and both parts of the ball condition."""
    corkscrews = corkscrews if corkscrews is not None else compute_corkscrews(tree, complex_.grid)
    report = None
    for k0 in candidates:
        builder = RegionBuilder(tree, complex_, k0=k0, tau=tau, corkscrews=corkscrews)
        report = check_region_coverage(builder, min_delta, children=children)
        logger.info("K0=%g: %d uncovered cells, %d ball failures, %d child ball failures", k0,
                    report.uncovered_cells, len(report.ball_failures), len(report.child_failures))
        if report.passed:
            return float(k0), report
    return float(candidates[-1]), report


def segment_point(builder: RegionBuilder, q: int, theta: float) -> np.ndarray:
    """P_Q(θ) = x̂_Q + θ(X_Q - x̂_Q)."""
    row = builder.corkscrews.loc[q]
    hat = np.array([row["hat_x"], row["hat_y"]])
    return hat + theta * (np.array([row["X"], row["Y"]]) - hat)


def cylinder_points(builder: RegionBuilder, q: int, theta0: float) -> np.ndarray:
    """Samples of Ξ_Q: discs of radius γθ₀r_Q/10 around P_Q(θ), θ ∈ [θ₀, 1]."""
    row = builder.corkscrews.loc[q]
    radius = row["gamma"] * theta0 * row["r"] / 10
    thetas = np.linspace(theta0, 1.0, XI_SAMPLES)
    angles = 2 * np.pi * np.arange(8) / 8
    disc = np.vstack([[0.0, 0.0], 0.99 * radius * np.column_stack([np.cos(angles), np.sin(angles)])])
    spine = np.array([segment_point(builder, q, t) for t in thetas])
    return (spine[:, None, :] + disc[None, :, :]).reshape(-1, 2)


@dataclass
class ThetaCertificate:
    theta0: Optional[float]
    tested_cubes: int
    violations: int
    counterexample: Optional[Tuple[int, int]] = None
    per_theta: Dict[float, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.theta0 is not None


def _square_region_index(builder: RegionBuilder, mode: str) -> Tuple[np.ndarray, np.ndarray]:
    pairs_q, pairs_s = [], []
    for q in range(len(builder.tree.cubes)):
        members = builder.region_members(q, mode)
        pairs_q.append(np.full(len(members), q))
        pairs_s.append(members)
    q = np.concatenate(pairs_q) if pairs_q else np.zeros(0, dtype=np.int64)
    s = np.concatenate(pairs_s) if pairs_s else np.zeros(0, dtype=np.int64)
    order = np.argsort(s, kind="stable")
    return q[order], s[order]


def regions_meeting_ball(builder: RegionBuilder, center: np.ndarray, radius: float, index=None, mode: str = "plain") -> np.ndarray:
    """Cubes Q' whose U_{Q'} meets the open ball, decided on exact geometry."""
    complex_ = builder.complex
    if complex_.center_tree is None:
        return np.zeros(0, dtype=np.int64)
    region_of, square = index if index is not None else _square_region_index(builder, mode)
    dilation = builder.dilation(mode)
    candidates = np.asarray(
        complex_.center_tree.query_ball_point(center, radius + dilation * complex_.max_side * np.sqrt(0.5)), dtype=np.int64
    )
    if len(candidates) == 0:
        return candidates
    d, _ = point_box_distance(np.repeat(center[None, :], len(candidates), axis=0), complex_.dilated(candidates, dilation))
    hit = candidates[d < radius]
    lo = np.searchsorted(square, hit, side="left")
    hi = np.searchsorted(square, hit, side="right")
    found = [region_of[a:b] for a, b in zip(lo, hi)]
    return np.unique(np.concatenate(found)) if found else np.zeros(0, dtype=np.int64)


def theta0_certificate(builder: RegionBuilder, candidates: Sequence[float] = THETA_CANDIDATES) -> ThetaCertificate:
    """
    Largest θ₀ among the candidates such that every region U_{Q'} meeting
    B(P_Q(θ₀), γθ₀r_Q/10) belongs to a strict descendant Q' of Q, for every
    cube with a resolved corkscrew.
    """
    tree = builder.tree
    index = _square_region_index(builder, "plain")
    cubes = [q for q in range(len(tree.cubes)) if builder.corkscrews.at[q, "gamma"] > 0]
    certificate = ThetaCertificate(theta0=None, tested_cubes=len(cubes), violations=0)
    for theta in sorted(candidates, reverse=True):
        violations = 0
        first = None
        for q in cubes:
            row = builder.corkscrews.loc[q]
            radius = row["gamma"] * theta * row["r"] / 10
            for other in regions_meeting_ball(builder, segment_point(builder, q, theta), radius, index):
                if other == q or not tree.contains(q, int(other)):
                    violations += 1
                    first = first or (int(q), int(other))
        certificate.per_theta[float(theta)] = violations
        if violations == 0:
            certificate.theta0 = float(theta)
            certificate.violations = 0
            certificate.counterexample = None
            logger.info("θ0 certificate: θ0=%g over %d cubes", theta, len(cubes))
            return certificate
        certificate.violations = violations
        certificate.counterexample = first
    logger.warning("no θ0 candidate passes; counterexample %s", certificate.counterexample)
    return certificate


@dataclass
class CylinderReport:
    pairs: int
    failures: int
    worst_fraction: float

    @property
    def passed(self) -> bool:
        return self.failures == 0


def cylinder_inclusion_check(builder: RegionBuilder, theta0: float, cubes: Optional[Iterable[int]] = None) -> CylinderReport:
    """Ξ_P ⊆ U*_Q for every cube Q and every sibling P of Q (Q included)."""
    tree = builder.tree
    cubes = list(range(len(tree.cubes))) if cubes is None else list(cubes)
    pairs = failures = 0
    worst = 1.0
    for q in cubes:
        for p in tree.siblings(q):
            if builder.corkscrews.at[int(p), "gamma"] <= 0:
                continue
            samples = cylinder_points(builder, int(p), theta0)
            fraction = float(builder.contains(q, "star", samples).mean())
            pairs += 1
            worst = min(worst, fraction)
            if fraction < 1.0:
                failures += 1
    return CylinderReport(pairs=pairs, failures=failures, worst_fraction=worst)


def touching_ball_check(builder: RegionBuilder, q: int, point: Sequence[float], theta: float) -> bool:
    """
    Whether the nearest boundary point of Y lies in Δ̂_Q, for Y in B(P_Q(θ), r_Q).
    """
    y = np.asarray(point, dtype=float)
    r = float(builder.corkscrews.at[q, "r"])
    if np.hypot(*(y - segment_point(builder, q, theta))) >= r:
        raise ParameterError("Y is not inside B(P_Q(θ), r_Q)", {"cube": int(q), "theta": theta})
    _, nearest = builder.tree.boundary.oracle.nearest(y[None, :])
    row = builder.corkscrews.loc[q]
    if np.hypot(nearest[0, 0] - row["hat_x"], nearest[0, 1] - row["hat_y"]) >= row["hat_radius"]:
        return False
    atom, _ = builder.tree.locate(nearest)
    cube = builder.tree.cubes.loc[q]
    return bool(cube["start"] <= atom[0] < cube["stop"])
