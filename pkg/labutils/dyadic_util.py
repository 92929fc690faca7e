import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from labutils.boundary_util import BoundarySet, Component, point_box_distance, point_segment_distance
from labutils.error_util import GeometryError, ParameterError

logger = logging.getLogger(__name__)

MAX_DEPTH = 14
MAX_CHILDREN = 32
EXACT_SEPARATION = 1.0

CUBE_COLUMNS = [
    "id", "generation", "index", "parent", "start", "stop",
    "cx", "cy", "side", "sigma", "outer", "inner", "first_child", "n_children"
]


@dataclass
class Atoms:
    """Finest boundary pieces; every cube is a contiguous range of atoms."""
    geometry: np.ndarray
    is_box: np.ndarray
    mass: np.ndarray
    component: np.ndarray

    def __len__(self) -> int:
        return len(self.mass)

    @property
    def centers(self) -> np.ndarray:
        return np.column_stack([
            0.5 * (self.geometry[:, 0] + self.geometry[:, 2]),
            0.5 * (self.geometry[:, 1] + self.geometry[:, 3])
        ])

    @property
    def radii(self) -> np.ndarray:
        return 0.5 * np.hypot(self.geometry[:, 2] - self.geometry[:, 0], self.geometry[:, 3] - self.geometry[:, 1])

    def distance(self, points: np.ndarray, index: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Exact distance from points[i] to atom index[i] and the nearest point on it."""
        dist = np.empty(len(index))
        near = np.empty((len(index), 2))
        box = self.is_box[index]
        if np.any(box):
            dist[box], near[box] = point_box_distance(points[box], self.geometry[index[box]])
        if np.any(~box):
            dist[~box], near[~box] = point_segment_distance(points[~box], self.geometry[index[~box]])
        return dist, near

    def farthest(self, points: np.ndarray, index: np.ndarray) -> np.ndarray:
        g = self.geometry[index]
        return np.maximum.reduce([
            np.hypot(points[:, 0] - g[:, 0], points[:, 1] - g[:, 1]),
            np.hypot(points[:, 0] - g[:, 2], points[:, 1] - g[:, 3]),
            np.where(self.is_box[index], np.hypot(points[:, 0] - g[:, 0], points[:, 1] - g[:, 3]), 0.0),
            np.where(self.is_box[index], np.hypot(points[:, 0] - g[:, 2], points[:, 1] - g[:, 1]), 0.0),
        ])


@dataclass
class DyadicTree:
    boundary: BoundarySet
    atoms: Atoms
    cubes: pd.DataFrame
    max_depth: int
    method: str
    a0: float = 0.0
    a1: float = 0.0
    _atom_tree: Optional[cKDTree] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.cubes)

    @property
    def roots(self) -> np.ndarray:
        return self.cubes.index[self.cubes["generation"] == 0].to_numpy()

    def generation(self, g: int) -> np.ndarray:
        return self.cubes.index[self.cubes["generation"] == g].to_numpy()

    def children(self, q: int) -> np.ndarray:
        row = self.cubes.loc[q]
        return np.arange(row["first_child"], row["first_child"] + row["n_children"], dtype=np.int64)

    def parent(self, q: int) -> int:
        return int(self.cubes.at[q, "parent"])

    def ancestors(self, q: int) -> List[int]:
        """Chain from q up to its root, q included."""
        chain = [int(q)]
        while self.cubes.at[chain[-1], "parent"] >= 0:
            chain.append(int(self.cubes.at[chain[-1], "parent"]))
        return chain

    def siblings(self, q: int) -> np.ndarray:
        p = self.parent(q)
        if p < 0:
            return self.roots
        return self.children(p)

    def contains(self, outer: int, inner: int) -> bool:
        a = self.cubes.loc[outer]
        b = self.cubes.loc[inner]
        return bool(b["generation"] >= a["generation"] and b["start"] >= a["start"] and b["stop"] <= a["stop"])

    def descendants(self, q: int, include_self: bool = True, max_generation: Optional[int] = None) -> np.ndarray:
        """Ids of 𝔻_Q in generation-major order."""
        row = self.cubes.loc[q]
        gens = self.cubes["generation"].to_numpy()
        starts = self.cubes["start"].to_numpy()
        stops = self.cubes["stop"].to_numpy()
        mask = (gens >= row["generation"]) & (starts >= row["start"]) & (stops <= row["stop"])
        if not include_self:
            mask &= gens > row["generation"]
        if max_generation is not None:
            mask &= gens <= max_generation
        return np.flatnonzero(mask)

    def cube_of_atom(self, generation: int, atom: np.ndarray) -> np.ndarray:
        ids = self.generation(generation)
        starts = self.cubes["start"].to_numpy()[ids]
        return ids[np.searchsorted(starts, atom, side="right") - 1]

    def cube_masses(self, atom_weights: np.ndarray) -> np.ndarray:
        """Aggregate a per-atom measure onto every cube."""
        atom_weights = np.asarray(atom_weights, dtype=float)
        cumulative = np.concatenate([[0.0], np.cumsum(atom_weights)])
        starts = self.cubes["start"].to_numpy()
        stops = self.cubes["stop"].to_numpy()
        return cumulative[stops] - cumulative[starts]

    def sides(self) -> np.ndarray:
        return self.cubes["side"].to_numpy()

    def centers(self) -> np.ndarray:
        return self.cubes[["cx", "cy"]].to_numpy()

    def locate(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Nearest atom to each point by exact distance, with the distance."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self._atom_tree is None:
            self._atom_tree = cKDTree(self.atoms.centers)
        _, first = self._atom_tree.query(points)
        upper, _ = self.atoms.distance(points, first)
        lists = self._atom_tree.query_ball_point(points, upper + self.atoms.radii.max() + 1e-12)
        counts = np.fromiter((len(item) for item in lists), dtype=np.int64, count=len(lists))
        query = np.repeat(np.arange(len(points)), counts)
        candidate = np.fromiter((j for item in lists for j in item), dtype=np.int64, count=int(counts.sum()))
        d, _ = self.atoms.distance(points[query], candidate)
        order = np.lexsort((candidate, d, query))
        first_of_query = order[np.searchsorted(query[order], np.arange(len(points)))]
        return candidate[first_of_query], d[first_of_query]

    def surface_ball_atoms(self, center: Sequence[float], radius: float) -> np.ndarray:
        """Atoms whose center lies in B(center, radius)."""
        if self._atom_tree is None:
            self._atom_tree = cKDTree(self.atoms.centers)
        return np.sort(np.asarray(self._atom_tree.query_ball_point(np.asarray(center, dtype=float), radius), dtype=np.int64))

    def to_frame(self) -> pd.DataFrame:
        return self.cubes[["generation", "index", "cx", "cy", "side", "sigma", "parent"]].reset_index(drop=True)


def _path_atoms(component: Component, depth: int) -> np.ndarray:
    """Arclength pieces of a vertex path cut at 2^-depth marks and at vertices."""
    edges = component.edges
    lengths = np.hypot(edges[:, 2] - edges[:, 0], edges[:, 3] - edges[:, 1])
    offsets = np.concatenate([[0.0], np.cumsum(lengths)])
    step = 2.0 ** -depth
    pieces = []
    for e, (edge, s0, s1) in enumerate(zip(edges, offsets[:-1], offsets[1:])):
        marks = np.arange(np.floor(s0 / step) + 1, np.ceil(s1 / step)) * step
        cuts = np.concatenate([[s0], marks[(marks > s0 + 1e-12) & (marks < s1 - 1e-12)], [s1]])
        t = (cuts - s0) / lengths[e]
        a = edge[:2][None, :] + t[:-1, None] * (edge[2:] - edge[:2])[None, :]
        b = edge[:2][None, :] + t[1:, None] * (edge[2:] - edge[:2])[None, :]
        pieces.append(np.column_stack([a, b, cuts[:-1], cuts[1:]]))
    return np.concatenate(pieces)


def _component_labels(component: Component, depth: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Atoms of one component and their cube label at each generation.

    Returns:
        Tuple of atom geometry (n, 4), box flags (n,) and labels (depth + 1, n)
        where labels[g, i] identifies the generation-g cube of atom i.
    """
    if component.kind == "cantor":
        if depth > 2 * component.generation:
            raise GeometryError(
                f"depth {depth} exceeds the resolution of {component.name}",
                {"max_depth": 2 * component.generation}
            )
        squares = component.squares
        n = len(squares)
        labels = np.zeros((depth + 1, n), dtype=np.int64)
        # Atoms are stored bottom-left, bottom-right, top-left, top-right per level,
        # so midline splits are contiguous halves.
        for g in range(depth + 1):
            labels[g] = np.arange(n) // (n >> g)
        return squares, np.ones(n, dtype=bool), labels
    pieces = _path_atoms(component, depth)
    midpoint = 0.5 * (pieces[:, 4] + pieces[:, 5])
    labels = np.stack([np.floor(midpoint / 2.0 ** -g).astype(np.int64) for g in range(depth + 1)])
    return pieces[:, :4], np.zeros(len(pieces), dtype=bool), labels


def _net_labels(centers: np.ndarray, depth: int, scale: float) -> np.ndarray:
    """
    Nested greedy nets: generation-g seeds are a maximal scale·2^-g separated
    subset containing the previous seeds, each atom joins the nearest seed
    inside its parent cube, ties by lowest index.
    """
    n = len(centers)
    labels = np.zeros((depth + 1, n), dtype=np.int64)
    tree = cKDTree(centers)
    seeds = np.array([0], dtype=np.int64)
    for g in range(depth + 1):
        radius = scale * 2.0 ** -g
        covered = np.zeros(n, dtype=bool)
        for s in seeds:
            covered[tree.query_ball_point(centers[s], radius * (1 - 1e-12))] = True
        new = []
        for i in range(n):
            if not covered[i]:
                new.append(i)
                covered[tree.query_ball_point(centers[i], radius * (1 - 1e-12))] = True
        seeds = np.sort(np.concatenate([seeds, np.asarray(new, dtype=np.int64)]))
        parent = labels[g - 1] if g > 0 else np.zeros(n, dtype=np.int64)
        seed_parent = parent[seeds]
        for p in np.unique(parent):
            members = np.flatnonzero(parent == p)
            own = seeds[seed_parent == p]
            d = np.hypot(centers[members, None, 0] - centers[None, own, 0], centers[members, None, 1] - centers[None, own, 1])
            labels[g, members] = own[np.argmin(d, axis=1)]
    return labels


def build_dyadic_tree(boundary: BoundarySet, max_depth: int) -> DyadicTree:
    """
    Build Christ–David cubes on the boundary down to `max_depth`.

    Cantor components use their 4-adic squares, paths use dyadic arclength
    intervals, and components closer than unit distance are merged into one
    nested net tree.

    Args:
        boundary: The boundary set.
        max_depth: Deepest generation, at most 14.

    Returns:
        The DyadicTree with measured a₀ and a₁.
    """
    if not 0 <= max_depth <= MAX_DEPTH:
        raise ParameterError(f"max_depth must be in [0, {MAX_DEPTH}], got {max_depth}")
    if not boundary.components:
        raise ParameterError("boundary is empty")

    groups = _separated_groups(boundary.components)
    method = "exact" if all(len(group) == 1 for group in groups) else "net"
    geometry, is_box, component, keys = [], [], [], []
    for gi, group in enumerate(groups):
        parts = [(_component_labels(boundary.components[c], max_depth), c) for c in group]
        geo = np.concatenate([p[0][0] for p in parts])
        box = np.concatenate([p[0][1] for p in parts])
        comp = np.concatenate([np.full(len(p[0][1]), p[1]) for p in parts])
        if len(group) == 1:
            labels = parts[0][0][2]
        else:
            centers = np.column_stack([0.5 * (geo[:, 0] + geo[:, 2]), 0.5 * (geo[:, 1] + geo[:, 3])])
            labels = _net_labels(centers, max_depth, 1.0)
        key = np.vstack([np.full((1, len(box)), gi), labels])
        geometry.append(geo)
        is_box.append(box)
        component.append(comp)
        keys.append(key)
    geometry = np.concatenate(geometry)
    is_box = np.concatenate(is_box)
    component = np.concatenate(component)
    keys = np.concatenate(keys, axis=1)

    order = np.lexsort(np.vstack([np.arange(keys.shape[1]), keys[::-1]]))
    geometry, is_box, component, keys = geometry[order], is_box[order], component[order], keys[:, order]
    mass = np.where(is_box, geometry[:, 2] - geometry[:, 0],
                    np.hypot(geometry[:, 2] - geometry[:, 0], geometry[:, 3] - geometry[:, 1]))
    atoms = Atoms(geometry=geometry, is_box=is_box, mass=mass, component=component)

    cubes = _assemble_cubes(atoms, keys, max_depth)
    tree = DyadicTree(boundary=boundary, atoms=atoms, cubes=cubes, max_depth=max_depth, method=method)
    _measure_radii(tree)
    logger.info("dyadic tree (%s): %d atoms, %d cubes, depth %d, a0=%.3g a1=%.3g",
                method, len(atoms), len(cubes), max_depth, tree.a0, tree.a1)
    return tree


def _separated_groups(components: List[Component]) -> List[List[int]]:
    boxes = [c.bbox for c in components]
    parent = list(range(len(components)))

    def find(i: int) -> int:
        while parent[i] != i:
            i = parent[i]
        return i

    for i in range(len(components)):
        for j in range(i + 1, len(components)):
            gap_x = max(boxes[j].x0 - boxes[i].x1, boxes[i].x0 - boxes[j].x1, 0.0)
            gap_y = max(boxes[j].y0 - boxes[i].y1, boxes[i].y0 - boxes[j].y1, 0.0)
            if np.hypot(gap_x, gap_y) < EXACT_SEPARATION:
                parent[find(j)] = find(i)
    groups: Dict[int, List[int]] = {}
    for i in range(len(components)):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def _assemble_cubes(atoms: Atoms, keys: np.ndarray, depth: int) -> pd.DataFrame:
    frames = []
    next_id = 0
    previous_starts = None
    previous_ids = None
    for g in range(depth + 1):
        key = keys[: g + 2]
        change = np.any(key[:, 1:] != key[:, :-1], axis=0)
        starts = np.concatenate([[0], np.flatnonzero(change) + 1])
        stops = np.concatenate([starts[1:], [len(atoms)]])
        ids = np.arange(next_id, next_id + len(starts))
        if previous_starts is None:
            parent = np.full(len(starts), -1)
        else:
            parent = previous_ids[np.searchsorted(previous_starts, starts, side="right") - 1]
        frames.append(pd.DataFrame({
            "id": ids, "generation": g, "index": np.arange(len(starts)),
            "parent": parent, "start": starts, "stop": stops
        }))
        next_id += len(starts)
        previous_starts, previous_ids = starts, ids
    cubes = pd.concat(frames, ignore_index=True).set_index("id", drop=False)
    cubes.index.name = None

    cumulative = np.concatenate([[0.0], np.cumsum(atoms.mass)])
    cubes["sigma"] = cumulative[cubes["stop"].to_numpy()] - cumulative[cubes["start"].to_numpy()]
    cubes["side"] = 2.0 ** -cubes["generation"].to_numpy().astype(float)

    counts = cubes[cubes["parent"] >= 0].groupby("parent")["id"].agg(["min", "count"])
    cubes["first_child"] = -1
    cubes["n_children"] = 0
    cubes.loc[counts.index, "first_child"] = counts["min"].to_numpy()
    cubes.loc[counts.index, "n_children"] = counts["count"].to_numpy()

    centers = np.empty((len(cubes), 2))
    atom_centers = atoms.centers
    for q, (start, stop) in enumerate(zip(cubes["start"].to_numpy(), cubes["stop"].to_numpy())):
        member = np.arange(start, stop)
        g = atoms.geometry[member]
        target = np.array([0.5 * (g[:, [0, 2]].min() + g[:, [0, 2]].max()), 0.5 * (g[:, [1, 3]].min() + g[:, [1, 3]].max())])
        d, near = atoms.distance(np.repeat(target[None, :], len(member), axis=0), member)
        j = int(np.argmin(d))
        centers[q] = near[j] if d[j] > 0 else target
        if not atoms.is_box[member[j]] and d[j] > 0:
            centers[q] = atom_centers[member[np.argmin(np.hypot(*(atom_centers[member] - target).T))]]
    cubes["cx"] = centers[:, 0]
    cubes["cy"] = centers[:, 1]
    return cubes


def _measure_radii(tree: DyadicTree) -> None:
    atoms = tree.atoms
    cubes = tree.cubes
    centers = tree.centers()
    atom_tree = cKDTree(atoms.centers)
    max_radius = float(atoms.radii.max())
    outer = np.zeros(len(cubes))
    inner = np.full(len(cubes), np.inf)
    for q, (start, stop, side) in enumerate(zip(cubes["start"], cubes["stop"], cubes["side"])):
        x = centers[q:q + 1]
        member = np.arange(start, stop)
        outer[q] = float(atoms.farthest(np.repeat(x, len(member), axis=0), member).max())
        if stop - start == len(atoms):
            continue
        radius = side
        while True:
            candidates = np.asarray(atom_tree.query_ball_point(x[0], radius + max_radius), dtype=np.int64)
            candidates = candidates[(candidates < start) | (candidates >= stop)]
            if len(candidates):
                d, _ = atoms.distance(np.repeat(x, len(candidates), axis=0), candidates)
                if d.min() <= radius:
                    inner[q] = float(d.min())
                    break
            if radius > 4 * tree.boundary.ambient_box.diam:
                break
            radius *= 2
    cubes["outer"] = outer
    cubes["inner"] = inner
    side = cubes["side"].to_numpy()
    finite = np.isfinite(inner)
    tree.a0 = float((inner[finite] / side[finite]).min()) if np.any(finite) else 1.0
    tree.a1 = float((outer / side).max())


def atom_sample_points(tree: DyadicTree, spacing: float) -> Tuple[np.ndarray, np.ndarray]:
    """Points of E at the given spacing together with the atom holding each."""
    points, owners = [], []
    for i, (g, box) in enumerate(zip(tree.atoms.geometry, tree.atoms.is_box)):
        n = max(int(np.ceil(max(g[2] - g[0], g[3] - g[1]) / spacing - 1e-9)), 1)
        t = np.linspace(0.0, 1.0, n + 1)
        if box:
            gx, gy = np.meshgrid(g[0] + t * (g[2] - g[0]), g[1] + t * (g[3] - g[1]))
            chunk = np.column_stack([gx.ravel(), gy.ravel()])
        else:
            n = max(int(np.ceil(np.hypot(g[2] - g[0], g[3] - g[1]) / spacing - 1e-9)), 1)
            # half-open pieces; the closing endpoint belongs to the next atom
            t = np.arange(n) / n
            chunk = g[:2][None, :] + t[:, None] * (g[2:] - g[:2])[None, :]
        points.append(chunk)
        owners.append(np.full(len(chunk), i))
    return np.concatenate(points), np.concatenate(owners)


@dataclass
class DyadicReport:
    partition: bool
    nesting: bool
    single_parent: bool
    diameter: bool
    ball_sandwich: bool
    sigma_additivity_error: float
    max_children: int
    a0: float
    a1: float
    n_cubes: int
    n_points: int
    violations: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (self.partition and self.nesting and self.single_parent and self.diameter
                and self.ball_sandwich and self.sigma_additivity_error < 1e-12 and self.max_children <= MAX_CHILDREN)


def check_dyadic_properties(tree: DyadicTree, spacing: Optional[float] = None) -> DyadicReport:
    """
    Verify the dyadic cube properties exhaustively on the discrete representation.

    Args:
        tree: The tree to check.
        spacing: Sample spacing for the ball sandwich, default 4^-6.

    Returns:
        A DyadicReport; `violations` names offending cubes.
    """
    spacing = spacing or 4.0 ** -6
    cubes = tree.cubes
    violations: List[str] = []
    n_atoms = len(tree.atoms)

    partition = True
    for g in range(tree.max_depth + 1):
        ids = tree.generation(g)
        starts = cubes["start"].to_numpy()[ids]
        stops = cubes["stop"].to_numpy()[ids]
        if starts[0] != 0 or stops[-1] != n_atoms or np.any(starts[1:] != stops[:-1]) or np.any(stops <= starts):
            partition = False
            violations.append(f"generation {g} is not a partition")

    parent = cubes["parent"].to_numpy()
    gens = cubes["generation"].to_numpy()
    has_parent = parent >= 0
    single_parent = bool(np.all(has_parent == (gens > 0)))
    nesting = True
    if np.any(has_parent):
        child = np.flatnonzero(has_parent)
        p = parent[child]
        ok = (
            (cubes["start"].to_numpy()[child] >= cubes["start"].to_numpy()[p])
            & (cubes["stop"].to_numpy()[child] <= cubes["stop"].to_numpy()[p])
            & (gens[p] == gens[child] - 1)
        )
        nesting = bool(np.all(ok))
        violations.extend(f"cube {c} escapes its parent" for c in child[~ok][:10])

    sigma = cubes["sigma"].to_numpy()
    child_sum = np.bincount(parent[has_parent], weights=sigma[has_parent], minlength=len(cubes))
    internal = cubes["n_children"].to_numpy() > 0
    additivity = float(np.max(np.abs(child_sum[internal] - sigma[internal]) / sigma[internal])) if np.any(internal) else 0.0

    side = cubes["side"].to_numpy()
    diameter = bool(np.all(2 * cubes["outer"].to_numpy() <= 2 * tree.a1 * side * (1 + 1e-12)))

    points, owner = atom_sample_points(tree, spacing)
    point_tree = cKDTree(points)
    sandwich = True
    centers = tree.centers()
    for q in range(len(cubes)):
        start, stop = cubes.at[q, "start"], cubes.at[q, "stop"]
        near = np.asarray(point_tree.query_ball_point(centers[q], tree.a0 * side[q] * (1 - 1e-9)), dtype=np.int64)
        if np.any((owner[near] < start) | (owner[near] >= stop)):
            sandwich = False
            violations.append(f"cube {q}: foreign point inside a0 ball")
        member = (owner >= start) & (owner < stop)
        dist = np.hypot(points[member, 0] - centers[q, 0], points[member, 1] - centers[q, 1])
        if dist.size and dist.max() > tree.a1 * side[q] * (1 + 1e-9):
            sandwich = False
            violations.append(f"cube {q}: member point outside a1 ball")

    report = DyadicReport(
        partition=partition,
        nesting=nesting,
        single_parent=single_parent,
        diameter=diameter,
        ball_sandwich=sandwich,
        sigma_additivity_error=additivity,
        max_children=int(cubes["n_children"].max()),
        a0=tree.a0,
        a1=tree.a1,
        n_cubes=len(cubes),
        n_points=len(points),
        violations=violations
    )
    if not report.passed:
        logger.warning("dyadic property check failed: %s", violations[:5])
    return report
