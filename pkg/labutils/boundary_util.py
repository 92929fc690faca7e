import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from labutils.error_util import ParameterError

logger = logging.getLogger(__name__)

MAX_CANTOR_GENERATION = 8
ORACLE_PIECE_LENGTH = 1.0 / 16

# Axis directions used by ray casting: +x, -x, +y, -y.
DIRECTIONS = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def diam(self) -> float:
        return float(np.hypot(self.width, self.height))

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return (
            (points[:, 0] >= self.x0) & (points[:, 0] <= self.x1)
            & (points[:, 1] >= self.y0) & (points[:, 1] <= self.y1)
        )

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass
class Component:
    """
    One connected family of boundary pieces.

    Cantor components carry solid squares whose σ-mass is their side length;
    segment and polyline components carry a vertex path whose σ-mass is its
    arclength. `exclusion` says which side of the component is not part of Ω:
    "solid" (the squares), "below" (a horizontal floor line), "exterior" (a
    closed polyline) or "none" (a slit).
    """
    name: str
    kind: str
    exclusion: str
    squares: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    generation: int = 0

    @property
    def edges(self) -> np.ndarray:
        if len(self.vertices) < 2:
            return np.zeros((0, 4))
        return np.column_stack([self.vertices[:-1], self.vertices[1:]])

    @property
    def measure(self) -> float:
        if self.kind == "cantor":
            return float(np.sum(self.squares[:, 2] - self.squares[:, 0]))
        edges = self.edges
        return float(np.sum(np.hypot(edges[:, 2] - edges[:, 0], edges[:, 3] - edges[:, 1])))

    @property
    def bbox(self) -> Box:
        if self.kind == "cantor":
            lo = self.squares[:, :2].min(axis=0)
            hi = self.squares[:, 2:].max(axis=0)
        else:
            lo = self.vertices.min(axis=0)
            hi = self.vertices.max(axis=0)
        return Box(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


@dataclass
class BoundarySet:
    components: List[Component]
    ambient_box: Box
    regularity_hint: float = 1.0

    @property
    def measure(self) -> float:
        return float(sum(component.measure for component in self.components))

    @property
    def squares(self) -> np.ndarray:
        blocks = [c.squares for c in self.components if c.kind == "cantor"]
        return np.concatenate(blocks) if blocks else np.zeros((0, 4))

    @property
    def segments(self) -> np.ndarray:
        blocks = [c.edges for c in self.components if c.kind != "cantor"]
        return np.concatenate(blocks) if blocks else np.zeros((0, 4))

    @cached_property
    def oracle(self) -> "DistanceOracle":
        return DistanceOracle(self)

    def piece_table(self) -> pd.DataFrame:
        rows = []
        for index, component in enumerate(self.components):
            if component.kind == "cantor":
                for sq in component.squares:
                    rows.append((index, "square", *sq, sq[2] - sq[0]))
            else:
                for edge in component.edges:
                    rows.append((index, "segment", *edge, float(np.hypot(edge[2] - edge[0], edge[3] - edge[1]))))
        return pd.DataFrame(rows, columns=["component", "kind", "x0", "y0", "x1", "y1", "measure"])

    def is_excluded(self, points: np.ndarray) -> np.ndarray:
        """Points that lie in the closed complement of Ω (Σ included only for solid squares)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        excluded = self.oracle.inside_squares(points)
        for component in self.components:
            if component.exclusion == "below":
                excluded |= points[:, 1] < component.vertices[0, 1]
            elif component.exclusion == "exterior":
                excluded |= ~points_in_polygon(points, component.vertices)
        return excluded

    def in_domain(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        distance = self.oracle.distance(points)
        return ~self.is_excluded(points) & (distance > 0) & self.ambient_box.contains(points)


def points_in_polygon(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Even-odd rule over the edges of a closed vertex path."""
    inside = np.zeros(len(points), dtype=bool)
    px, py = points[:, 0], points[:, 1]
    for (ax, ay), (bx, by) in zip(vertices[:-1], vertices[1:]):
        straddles = (ay > py) != (by > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= straddles & (px < x_cross)
    return inside


def point_box_distance(points: np.ndarray, boxes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    nearest = np.column_stack([
        np.clip(points[:, 0], boxes[:, 0], boxes[:, 2]),
        np.clip(points[:, 1], boxes[:, 1], boxes[:, 3])
    ])
    return np.hypot(points[:, 0] - nearest[:, 0], points[:, 1] - nearest[:, 1]), nearest


def point_segment_distance(points: np.ndarray, segments: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = segments[:, :2]
    d = segments[:, 2:] - a
    length2 = np.einsum("ij,ij->i", d, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(length2 > 0, np.einsum("ij,ij->i", points - a, d) / length2, 0.0)
    t = np.clip(t, 0.0, 1.0)
    nearest = a + t[:, None] * d
    return np.hypot(points[:, 0] - nearest[:, 0], points[:, 1] - nearest[:, 1]), nearest


def box_box_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    gap_x = np.maximum(np.maximum(b[:, 0] - a[:, 2], a[:, 0] - b[:, 2]), 0.0)
    gap_y = np.maximum(np.maximum(b[:, 1] - a[:, 3], a[:, 1] - b[:, 3]), 0.0)
    return np.hypot(gap_x, gap_y)


def segment_meets_box(segments: np.ndarray, boxes: np.ndarray, open_box: bool = False) -> np.ndarray:
    """Liang–Barsky clipping; `open_box` tests against the box interior."""
    x0, y0 = segments[:, 0], segments[:, 1]
    dx, dy = segments[:, 2] - x0, segments[:, 3] - y0
    t_lo = np.zeros(len(segments))
    t_hi = np.ones(len(segments))
    ok = np.ones(len(segments), dtype=bool)
    for p, q in (
        (-dx, x0 - boxes[:, 0]),
        (dx, boxes[:, 2] - x0),
        (-dy, y0 - boxes[:, 1]),
        (dy, boxes[:, 3] - y0)
    ):
        parallel = p == 0
        if open_box:
            ok &= ~(parallel & (q <= 0))
        else:
            ok &= ~(parallel & (q < 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(parallel, 0.0, q / np.where(parallel, 1.0, p))
        entering = ~parallel & (p < 0)
        leaving = ~parallel & (p > 0)
        t_lo = np.where(entering, np.maximum(t_lo, r), t_lo)
        t_hi = np.where(leaving, np.minimum(t_hi, r), t_hi)
    if open_box:
        return ok & (t_lo < t_hi)
    return ok & (t_lo <= t_hi)


def box_segment_distance(boxes: np.ndarray, segments: np.ndarray) -> np.ndarray:
    d0, _ = point_box_distance(segments[:, :2], boxes)
    d1, _ = point_box_distance(segments[:, 2:], boxes)
    best = np.minimum(d0, d1)
    for cx, cy in ((0, 1), (2, 1), (0, 3), (2, 3)):
        corner = np.column_stack([boxes[:, cx], boxes[:, cy]])
        dc, _ = point_segment_distance(corner, segments)
        best = np.minimum(best, dc)
    return np.where(segment_meets_box(segments, boxes), 0.0, best)


def _ball_segment_fraction(centers: np.ndarray, r: float, segments: np.ndarray) -> np.ndarray:
    a = segments[:, :2]
    d = segments[:, 2:] - a
    length2 = np.einsum("ij,ij->i", d, d)
    f = a - centers
    b = np.einsum("ij,ij->i", f, d)
    c = np.einsum("ij,ij->i", f, f) - r * r
    disc = b * b - length2 * c
    root = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (-b - root) / length2
        t1 = (-b + root) / length2
    lo = np.clip(t0, 0.0, 1.0)
    hi = np.clip(t1, 0.0, 1.0)
    return np.where((disc > 0) & (length2 > 0), np.maximum(hi - lo, 0.0), 0.0)


def _chord_integral(x: np.ndarray, r: float) -> np.ndarray:
    """Antiderivative of √(r² - x²) on [-r, r]."""
    x = np.clip(x, -r, r)
    return 0.5 * (x * np.sqrt(np.maximum(r * r - x * x, 0.0)) + r * r * np.arcsin(x / r))


def _excess_integral(a: np.ndarray, b: np.ndarray, r: float, c: np.ndarray) -> np.ndarray:
    """∫_a^b max(√(r² - x²) - c, 0) dx for -r ≤ a ≤ b ≤ r."""
    w = np.where(c <= 0, r, np.sqrt(np.maximum(r * r - c * c, 0.0)))
    lo = np.clip(a, -w, w)
    hi = np.clip(b, -w, w)
    return _chord_integral(hi, r) - _chord_integral(lo, r) - c * (hi - lo)


def _ball_box_fraction(centers: np.ndarray, r: float, boxes: np.ndarray) -> np.ndarray:
    """Exact area fraction of each box covered by the disk B(center, r)."""
    fraction = np.zeros(len(boxes))
    dist, _ = point_box_distance(centers, boxes)
    far_x = np.maximum(np.abs(centers[:, 0] - boxes[:, 0]), np.abs(centers[:, 0] - boxes[:, 2]))
    far_y = np.maximum(np.abs(centers[:, 1] - boxes[:, 1]), np.abs(centers[:, 1] - boxes[:, 3]))
    full = np.hypot(far_x, far_y) <= r
    fraction[full] = 1.0
    partial = ~full & (dist < r)
    if np.any(partial):
        pb = boxes[partial]
        pc = centers[partial]
        a = np.clip(pb[:, 0] - pc[:, 0], -r, r)
        b = np.maximum(np.clip(pb[:, 2] - pc[:, 0], -r, r), a)
        y0 = pb[:, 1] - pc[:, 1]
        y1 = pb[:, 3] - pc[:, 1]
        # chord length clipped to [y0, y1], integrated over x in [a, b]
        area = (_excess_integral(a, b, r, y0) - _excess_integral(a, b, r, y1)
                - _excess_integral(a, b, r, -y0) + _excess_integral(a, b, r, -y1) + (y0 - y1) * (b - a))
        box_area = (pb[:, 2] - pb[:, 0]) * (pb[:, 3] - pb[:, 1])
        fraction[partial] = np.clip(np.divide(area, box_area, out=np.zeros(len(pb)), where=box_area > 0), 0.0, 1.0)
    return fraction


class DistanceOracle:
    """
    Exact distance, nearest-point, ray and measure queries against the piece
    list of a boundary. Long segments are split into short primitives so the
    KD-tree over primitive centers stays selective.
    """

    def __init__(self, boundary: BoundarySet):
        squares = boundary.squares
        segments = boundary.segments
        pieces = []
        for seg in segments:
            length = float(np.hypot(seg[2] - seg[0], seg[3] - seg[1]))
            n_sub = max(int(np.ceil(length / ORACLE_PIECE_LENGTH - 1e-12)), 1)
            t = np.linspace(0.0, 1.0, n_sub + 1)
            a = seg[:2][None, :] + t[:-1, None] * (seg[2:] - seg[:2])[None, :]
            b = seg[:2][None, :] + t[1:, None] * (seg[2:] - seg[:2])[None, :]
            pieces.append(np.column_stack([a, b]))
        segments = np.concatenate(pieces) if pieces else np.zeros((0, 4))

        self.n_boxes = len(squares)
        self.geometry = np.concatenate([squares, segments])
        self.is_box = np.arange(len(self.geometry)) < self.n_boxes
        if len(self.geometry) == 0:
            raise ParameterError("boundary has no pieces")
        self.mass = np.concatenate([
            squares[:, 2] - squares[:, 0],
            np.hypot(segments[:, 2] - segments[:, 0], segments[:, 3] - segments[:, 1])
        ])
        self.centers = np.column_stack([
            0.5 * (self.geometry[:, 0] + self.geometry[:, 2]),
            0.5 * (self.geometry[:, 1] + self.geometry[:, 3])
        ])
        self.radii = 0.5 * np.hypot(
            self.geometry[:, 2] - self.geometry[:, 0],
            self.geometry[:, 3] - self.geometry[:, 1]
        )
        self.max_radius = float(self.radii.max())
        self.tree = cKDTree(self.centers)
        self.box_tree = cKDTree(self.centers[:self.n_boxes]) if self.n_boxes else None
        logger.debug("distance oracle over %d boxes and %d segment pieces", self.n_boxes, len(segments))

    def _pairs(self, centers: np.ndarray, radii: np.ndarray, tree: cKDTree) -> Tuple[np.ndarray, np.ndarray]:
        lists = tree.query_ball_point(centers, radii)
        counts = np.fromiter((len(item) for item in lists), dtype=np.int64, count=len(lists))
        query = np.repeat(np.arange(len(lists)), counts)
        prim = np.fromiter((j for item in lists for j in item), dtype=np.int64, count=int(counts.sum()))
        return query, prim

    def _point_distances(self, points: np.ndarray, prim: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        dist = np.empty(len(prim))
        nearest = np.empty((len(prim), 2))
        box = self.is_box[prim]
        if np.any(box):
            dist[box], nearest[box] = point_box_distance(points[box], self.geometry[prim[box]])
        if np.any(~box):
            dist[~box], nearest[~box] = point_segment_distance(points[~box], self.geometry[prim[~box]])
        return dist, nearest

    def _box_distances(self, boxes: np.ndarray, prim: np.ndarray) -> np.ndarray:
        dist = np.empty(len(prim))
        box = self.is_box[prim]
        if np.any(box):
            dist[box] = box_box_distance(boxes[box], self.geometry[prim[box]])
        if np.any(~box):
            dist[~box] = box_segment_distance(boxes[~box], self.geometry[prim[~box]])
        return dist

    def nearest(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Exact distance to Σ and a nearest point of Σ for each query point.

        Args:
            points: Array of shape (n, 2).

        Returns:
            Tuple of distances (n,) and nearest points (n, 2).
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if len(points) == 0:
            return np.zeros(0), np.zeros((0, 2))
        _, first = self.tree.query(points)
        upper, _ = self._point_distances(points, first)
        query, prim = self._pairs(points, upper + self.max_radius + 1e-12, self.tree)
        dist, near = self._point_distances(points[query], prim)
        order = np.lexsort((dist, query))
        query, dist, near = query[order], dist[order], near[order]
        starts = np.searchsorted(query, np.arange(len(points)))
        return dist[starts], near[starts]

    def distance(self, points: np.ndarray) -> np.ndarray:
        return self.nearest(points)[0]

    def box_distance(self, boxes: np.ndarray) -> np.ndarray:
        """Exact distance from closed axis-aligned boxes (n, 4) to Σ."""
        boxes = np.atleast_2d(np.asarray(boxes, dtype=float))
        if len(boxes) == 0:
            return np.zeros(0)
        centers = np.column_stack([0.5 * (boxes[:, 0] + boxes[:, 2]), 0.5 * (boxes[:, 1] + boxes[:, 3])])
        half_diag = 0.5 * np.hypot(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1])
        _, first = self.tree.query(centers)
        upper = self._box_distances(boxes, first)
        query, prim = self._pairs(centers, upper + half_diag + self.max_radius + 1e-12, self.tree)
        dist = self._box_distances(boxes[query], prim)
        result = np.full(len(boxes), np.inf)
        np.minimum.at(result, query, dist)
        return result

    def inside_squares(self, points: np.ndarray) -> np.ndarray:
        inside = np.zeros(len(points), dtype=bool)
        if self.box_tree is None or len(points) == 0:
            return inside
        query, prim = self._pairs(points, np.full(len(points), self.radii[:self.n_boxes].max() + 1e-12), self.box_tree)
        boxes = self.geometry[prim]
        hit = (
            (points[query, 0] >= boxes[:, 0]) & (points[query, 0] <= boxes[:, 2])
            & (points[query, 1] >= boxes[:, 1]) & (points[query, 1] <= boxes[:, 3])
        )
        inside[np.unique(query[hit])] = True
        return inside

    def ray_distance(self, points: np.ndarray, direction: int, max_distance: float) -> np.ndarray:
        """
        Distance along an axis direction to the first point of Σ, inf when
        nothing is hit within `max_distance`.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        result = np.full(len(points), np.inf)
        if len(points) == 0:
            return result
        mid = points + 0.5 * max_distance * DIRECTIONS[direction]
        query, prim = self._pairs(mid, np.full(len(points), 0.5 * max_distance + self.max_radius + 1e-12), self.tree)
        if len(query) == 0:
            return result
        p = _to_positive_x(points[query], direction)
        g = self.geometry[prim]
        a = _to_positive_x(g[:, :2], direction)
        b = _to_positive_x(g[:, 2:], direction)
        t = np.full(len(query), np.inf)

        box = self.is_box[prim]
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        box_hit = box & (lo[:, 1] <= p[:, 1]) & (p[:, 1] <= hi[:, 1]) & (hi[:, 0] >= p[:, 0])
        t[box_hit] = np.maximum(lo[box_hit, 0] - p[box_hit, 0], 0.0)

        seg = ~box
        flat = seg & (a[:, 1] == b[:, 1])
        flat_hit = flat & (a[:, 1] == p[:, 1]) & (hi[:, 0] >= p[:, 0])
        t[flat_hit] = np.maximum(lo[flat_hit, 0] - p[flat_hit, 0], 0.0)
        slanted = seg & ~flat
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (p[:, 1] - a[:, 1]) / (b[:, 1] - a[:, 1])
            x_hit = a[:, 0] + s * (b[:, 0] - a[:, 0])
        slanted_hit = slanted & (s >= 0) & (s <= 1) & (x_hit >= p[:, 0])
        t[slanted_hit] = x_hit[slanted_hit] - p[slanted_hit, 0]

        t[t > max_distance] = np.inf
        np.minimum.at(result, query, t)
        return result

    def measure_in_ball(self, centers: np.ndarray, r: float) -> np.ndarray:
        """σ(B(x, r) ∩ Σ) for each center, exact on segments and boxes."""
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        query, prim = self._pairs(centers, np.full(len(centers), r + self.max_radius + 1e-12), self.tree)
        fraction = np.zeros(len(prim))
        box = self.is_box[prim]
        if np.any(box):
            fraction[box] = _ball_box_fraction(centers[query[box]], r, self.geometry[prim[box]])
        if np.any(~box):
            fraction[~box] = _ball_segment_fraction(centers[query[~box]], r, self.geometry[prim[~box]])
        return np.bincount(query, weights=fraction * self.mass[prim], minlength=len(centers))


def _to_positive_x(points: np.ndarray, direction: int) -> np.ndarray:
    if direction == 0:
        return points.copy()
    if direction == 1:
        return np.column_stack([-points[:, 0], points[:, 1]])
    if direction == 2:
        return np.column_stack([points[:, 1], points[:, 0]])
    return np.column_stack([-points[:, 1], points[:, 0]])


def cantor_squares(generation: int, center: Sequence[float] = (0.0, 0.0), side: float = 1.0) -> np.ndarray:
    """
    Squares of the 4-corner Cantor construction.

    Args:
        generation: Number of subdivisions k.
        center: Center of the generation-0 square.
        side: Side of the generation-0 square.

    Returns:
        Array (4**k, 4) of (x0, y0, x1, y1), children of one parent grouped
        as bottom-left, bottom-right, top-left, top-right.
    """
    corners = np.array([[center[0] - side / 2, center[1] - side / 2]])
    s = side
    for _ in range(generation):
        child = s / 4
        offsets = np.array([[0.0, 0.0], [s - child, 0.0], [0.0, s - child], [s - child, s - child]])
        corners = (corners[:, None, :] + offsets[None, :, :]).reshape(-1, 2)
        s = child
    return np.column_stack([corners, corners + s])


def build_cantor_boundary(
    generation: int,
    include_line: bool = False,
    line_offset: float = -2.0,
    box: Optional[Box] = None
) -> BoundarySet:
    """
    Build the generation-k Cantor set E_k, optionally with the floor line 𝕃.

    Args:
        generation: k in [0, 8].
        include_line: Whether to add the horizontal line y = line_offset.
        line_offset: Height of the line.
        box: Ambient truncation box, default [-2.5, 2.5] x [-2, 3].

    Returns:
        The boundary set; σ(E_k) = 1 and σ(𝕃) is the clipped length.
    """
    if not 0 <= generation <= MAX_CANTOR_GENERATION:
        raise ParameterError(f"generation must be in [0, {MAX_CANTOR_GENERATION}], got {generation}")
    if box is None:
        box = Box(-2.5, min(-2.0, line_offset), 2.5, 3.0)
    components = [Component(
        name=f"E{generation}",
        kind="cantor",
        exclusion="solid",
        squares=cantor_squares(generation),
        generation=generation
    )]
    if include_line:
        if not box.y0 <= line_offset < -0.5:
            raise ParameterError(f"line_offset {line_offset} must lie in the box and below E")
        components.append(_floor_line(box, line_offset))
    return BoundarySet(components=components, ambient_box=box, regularity_hint=4.0)


def _floor_line(box: Box, height: float) -> Component:
    return Component(
        name="L",
        kind="segment",
        exclusion="below",
        vertices=np.array([[box.x0, height], [box.x1, height]])
    )


def build_halfplane_boundary(box: Box) -> BoundarySet:
    """The line along the bottom edge of `box`; Ω is the box above it."""
    return BoundarySet(components=[_floor_line(box, box.y0)], ambient_box=box, regularity_hint=2.0)


def build_segment_boundary(
    start: Sequence[float],
    end: Sequence[float],
    box: Optional[Box] = None,
    exclusion: str = "none"
) -> BoundarySet:
    vertices = np.array([start, end], dtype=float)
    if np.allclose(vertices[0], vertices[1]):
        raise ParameterError("segment has zero length")
    if exclusion == "below" and vertices[0, 1] != vertices[1, 1]:
        raise ParameterError("floor segments must be horizontal")
    if box is None:
        lo = vertices.min(axis=0) - 1.0
        hi = vertices.max(axis=0) + 1.0
        box = Box(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))
    component = Component(name="segment", kind="segment", exclusion=exclusion, vertices=vertices)
    return BoundarySet(components=[component], ambient_box=box, regularity_hint=2.0)


def build_polygon_boundary(vertices: np.ndarray, box: Optional[Box] = None, name: str = "polygon") -> BoundarySet:
    """A closed polyline; everything outside it is excluded from Ω."""
    vertices = np.asarray(vertices, dtype=float)
    if len(vertices) < 3:
        raise ParameterError("a polygon needs at least 3 vertices")
    if not np.allclose(vertices[0], vertices[-1]):
        vertices = np.vstack([vertices, vertices[:1]])
    if box is None:
        lo = vertices.min(axis=0)
        hi = vertices.max(axis=0)
        box = Box(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))
    component = Component(name=name, kind="polyline", exclusion="exterior", vertices=vertices)
    return BoundarySet(components=[component], ambient_box=box, regularity_hint=2.0)


def build_disk_boundary(
    radius: float = 1.0,
    n_vertices: int = 512,
    center: Sequence[float] = (0.0, 0.0),
    box: Optional[Box] = None
) -> BoundarySet:
    if radius <= 0 or n_vertices < 8:
        raise ParameterError("disk needs a positive radius and at least 8 vertices")
    angles = 2.0 * np.pi * np.arange(n_vertices + 1) / n_vertices
    vertices = np.column_stack([center[0] + radius * np.cos(angles), center[1] + radius * np.sin(angles)])
    vertices[-1] = vertices[0]
    return build_polygon_boundary(vertices, box=box, name="disk")


def union_boundary(boundaries: Sequence[BoundarySet], box: Optional[Box] = None) -> BoundarySet:
    if not boundaries:
        raise ParameterError("union of no boundaries")
    if box is None:
        boxes = np.array([b.ambient_box.as_tuple() for b in boundaries])
        box = Box(boxes[:, 0].min(), boxes[:, 1].min(), boxes[:, 2].max(), boxes[:, 3].max())
    components = [c for b in boundaries for c in b.components]
    hint = max(b.regularity_hint for b in boundaries)
    return BoundarySet(components=components, ambient_box=box, regularity_hint=hint)


@dataclass
class RegularityReport:
    scales: List[float]
    c_min: List[float]
    c_max: List[float]
    n_centers: int
    clamped: List[float]

    @property
    def constant(self) -> float:
        """Two-sided Ahlfors constant max(C_max, 1/C_min) over the tested scales."""
        if not self.scales:
            return 1.0
        return float(max(max(self.c_max), 1.0 / max(min(self.c_min), 1e-300)))


def sample_boundary_points(boundary: BoundarySet, spacing: float) -> np.ndarray:
    """
    Deterministic points of E at the given spacing: a lattice inside each
    square (corners included) and equispaced points along each segment.
    """
    chunks = []
    for sq in boundary.squares:
        n = max(int(np.ceil((sq[2] - sq[0]) / spacing - 1e-9)), 1)
        t = np.linspace(0.0, 1.0, n + 1)
        xs = sq[0] + t * (sq[2] - sq[0])
        ys = sq[1] + t * (sq[3] - sq[1])
        gx, gy = np.meshgrid(xs, ys)
        chunks.append(np.column_stack([gx.ravel(), gy.ravel()]))
    for seg in boundary.segments:
        length = float(np.hypot(seg[2] - seg[0], seg[3] - seg[1]))
        n = max(int(np.ceil(length / spacing - 1e-9)), 1)
        t = np.linspace(0.0, 1.0, n + 1)
        chunks.append(seg[:2][None, :] + t[:, None] * (seg[2:] - seg[:2])[None, :])
    return np.concatenate(chunks) if chunks else np.zeros((0, 2))


def sample_boundary_centers(boundary: BoundarySet, count: int, seed: int) -> np.ndarray:
    """Random points of E drawn with probability proportional to σ."""
    rng = np.random.default_rng(seed)
    oracle = boundary.oracle
    prim = rng.choice(len(oracle.mass), size=count, p=oracle.mass / oracle.mass.sum())
    g = oracle.geometry[prim]
    u = rng.random((count, 2))
    points = np.empty((count, 2))
    box = oracle.is_box[prim]
    points[box] = g[box, :2] + u[box] * (g[box, 2:] - g[box, :2])
    points[~box] = g[~box, :2] + u[~box, :1] * (g[~box, 2:] - g[~box, :2])
    return points


def check_ahlfors_regularity(
    boundary: BoundarySet,
    scales: Sequence[float],
    centers: int = 200,
    seed: int = 0,
    points: Optional[np.ndarray] = None
) -> RegularityReport:
    """
    Measure σ(B(x, r) ∩ Σ) / r over sampled boundary centers.

    Args:
        boundary: The boundary set.
        scales: Radii to test; values outside (smallest piece, diam) are clamped.
        centers: Number of random centers when `points` is not given.
        seed: Seed for the random centers.
        points: Explicit centers on Σ.

    Returns:
        A RegularityReport with the per-scale extreme ratios.
    """
    oracle = boundary.oracle
    if points is None:
        points = sample_boundary_centers(boundary, centers, seed)
    points = np.atleast_2d(points)
    smallest = float(oracle.mass.min()) if boundary.squares.size else 0.0
    largest = boundary.ambient_box.diam
    report = RegularityReport(scales=[], c_min=[], c_max=[], n_centers=len(points), clamped=[])
    for r in scales:
        r_used = float(np.clip(r, max(smallest, 1e-12), largest))
        if r_used != r:
            report.clamped.append(float(r))
        ratio = oracle.measure_in_ball(points, r_used) / r_used
        report.scales.append(r_used)
        report.c_min.append(float(ratio.min()))
        report.c_max.append(float(ratio.max()))
    logger.info("Ahlfors check over %d centers and %d scales: constant %.3g",
                len(points), len(report.scales), report.constant)
    return report
