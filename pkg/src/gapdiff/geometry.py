"""Planar geometry for measure supports: snowflake fractals, segment sets,
point membership queries, and CSV serialization.

All functions are pure and operate on immutable value objects, so they are
safe to call concurrently.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DepthTooLarge, UnsupportedGeometry

# Points closer than this to a polygon edge are classified as inside.
SNAP_TOL = 1e-12

# Vertex count 3 * 4^depth stays tractable up to here.
MAX_KOCH_DEPTH = 8

FLOAT_FMT = "%.16e"


@dataclass(frozen=True)
class Rect:
    """Axis-aligned open rectangle, the computational domain."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValueError("rectangle needs xmin < xmax and ymin < ymax")

    @property
    def width(self):
        return self.xmax - self.xmin

    @property
    def height(self):
        return self.ymax - self.ymin

    def contains(self, x, y, tol=0.0):
        return (self.xmin - tol <= x <= self.xmax + tol
                and self.ymin - tol <= y <= self.ymax + tol)


def signed_area(vertices):
    """Shoelace signed area of a closed vertex loop (positive if CCW)."""
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


@dataclass(frozen=True)
class Polygon:
    """Simple counterclockwise polygon given by its vertex loop.

    The loop is stored without repeating the first vertex.  Vertex order
    and positive signed area are validated at construction; simplicity is
    the caller's responsibility (generated snowflakes are simple by
    construction).
    """

    vertices: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=float))
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ValueError("polygon needs at least 3 planar vertices")
        if signed_area(v) <= 0.0:
            raise ValueError("polygon must be counterclockwise (signed area > 0)")
        object.__setattr__(self, "vertices", v)

    @property
    def n_edges(self):
        return len(self.vertices)

    @property
    def area(self):
        return signed_area(self.vertices)

    @property
    def perimeter(self):
        d = np.roll(self.vertices, -1, axis=0) - self.vertices
        return float(np.sum(np.hypot(d[:, 0], d[:, 1])))

    def bounding_box(self):
        v = self.vertices
        return (v[:, 0].min(), v[:, 0].max(), v[:, 1].min(), v[:, 1].max())


@dataclass(frozen=True)
class SegmentSet:
    """Collection of straight segments, stored as an (k, 2, 2) array."""

    segments: np.ndarray

    def __post_init__(self):
        s = np.ascontiguousarray(np.asarray(self.segments, dtype=float))
        if s.ndim != 3 or s.shape[1:] != (2, 2) or s.shape[0] < 1:
            raise ValueError("segment set needs shape (k, 2, 2) with k >= 1")
        if np.any(self.lengths_of(s) <= 0.0):
            raise ValueError("all segments must have positive length")
        object.__setattr__(self, "segments", s)

    @staticmethod
    def lengths_of(segments):
        d = segments[:, 1, :] - segments[:, 0, :]
        return np.hypot(d[:, 0], d[:, 1])

    @property
    def lengths(self):
        return self.lengths_of(self.segments)

    @property
    def total_length(self):
        return float(self.lengths.sum())


@dataclass(frozen=True)
class SupportSpec:
    """Description of the measure support: the whole domain, a filled
    polygonal region, or a set of segments, each with a constant density."""

    kind: str
    density: float = 1.0
    polygon: Polygon | None = None
    segments: SegmentSet | None = None

    def __post_init__(self):
        if self.kind not in ("full", "region", "segments"):
            raise ValueError(f"unknown support kind {self.kind!r}")
        if self.density <= 0.0:
            raise ValueError("density must be positive")
        if self.kind == "region" and self.polygon is None:
            raise ValueError("region support needs a polygon")
        if self.kind == "segments" and self.segments is None:
            raise ValueError("segments support needs a segment set")

    @classmethod
    def full_domain(cls, density=1.0):
        return cls(kind="full", density=density)

    @classmethod
    def region(cls, polygon, density=1.0):
        return cls(kind="region", density=density, polygon=polygon)

    @classmethod
    def on_segments(cls, segments, density=1.0):
        return cls(kind="segments", density=density, segments=segments)


def koch_snowflake(depth, center=(0.0, 0.0), side=1.0):
    """Generate the filled Koch snowflake as a simple CCW polygon.

    The depth-0 polygon is the equilateral base triangle with one vertex
    pointing in +y, centered (centroid) at ``center``, with edge length
    ``side``.  Each refinement replaces every edge by four, adding an
    outward-pointing bump, so the result has exactly ``3 * 4**depth``
    edges.

    Parameters
    ----------
    depth : int
        Number of refinement rounds, 0 <= depth <= 8.
    center : pair of float
        Centroid of the base triangle.
    side : float
        Edge length of the base triangle.

    Raises
    ------
    DepthTooLarge
        If depth exceeds 8.
    """
    if depth < 0 or int(depth) != depth:
        raise ValueError("depth must be a nonnegative integer")
    if depth > MAX_KOCH_DEPTH:
        raise DepthTooLarge(f"snowflake depth {depth} exceeds maximum {MAX_KOCH_DEPTH}")
    if side <= 0.0:
        raise ValueError("side must be positive")

    cx, cy = float(center[0]), float(center[1])
    r_circ = side / np.sqrt(3.0)
    r_in = side / (2.0 * np.sqrt(3.0))
    verts = np.array([
        [cx, cy + r_circ],
        [cx - 0.5 * side, cy - r_in],
        [cx + 0.5 * side, cy - r_in],
    ])

    for _ in range(int(depth)):
        a = verts
        b = np.roll(verts, -1, axis=0)
        d = b - a
        p1 = a + d / 3.0
        p2 = a + 2.0 * d / 3.0
        # interior lies left of each CCW edge, so the bump points right
        outward = np.stack([d[:, 1], -d[:, 0]], axis=1)
        peak = a + 0.5 * d + outward * (np.sqrt(3.0) / 6.0)
        verts = np.stack([a, p1, peak, p2], axis=1).reshape(-1, 2)

    return Polygon(verts)


def points_in_polygon(points, polygon, snap_tol=SNAP_TOL):
    """Vectorized even-odd membership test for many points at once.

    Points within ``snap_tol`` of any edge count as inside, which makes
    the classification stable for vertices sitting exactly on edges.

    Parameters
    ----------
    points : array_like, shape (n, 2)
    polygon : Polygon

    Returns
    -------
    numpy.ndarray of bool, shape (n,)
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    a = polygon.vertices
    b = np.roll(a, -1, axis=0)
    n_edges = len(a)
    result = np.empty(len(pts), dtype=bool)

    # broadcasting points x edges; chunk to bound peak memory
    chunk = max(1, 4_000_000 // n_edges)
    ax, ay = a[None, :, 0], a[None, :, 1]
    bx, by = b[None, :, 0], b[None, :, 1]
    ex, ey = bx - ax, by - ay
    seg_len2 = ex * ex + ey * ey

    for lo in range(0, len(pts), chunk):
        p = pts[lo:lo + chunk]
        px = p[:, 0, None]
        py = p[:, 1, None]

        straddles = (ay > py) != (by > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = ax + (py - ay) * ex / ey
        crossings = np.count_nonzero(straddles & (px < x_cross), axis=1)
        inside = (crossings % 2) == 1

        t = ((px - ax) * ex + (py - ay) * ey) / seg_len2
        np.clip(t, 0.0, 1.0, out=t)
        dx = px - (ax + t * ex)
        dy = py - (ay + t * ey)
        on_edge = (dx * dx + dy * dy <= snap_tol * snap_tol).any(axis=1)

        result[lo:lo + chunk] = inside | on_edge
    return result


def point_in_polygon(point, polygon, snap_tol=SNAP_TOL):
    """Even-odd membership test for a single point (on-edge counts inside)."""
    return bool(points_in_polygon(np.asarray(point, dtype=float)[None, :],
                                  polygon, snap_tol=snap_tol)[0])


def polygon_is_simple(polygon):
    """Brute-force simplicity check: no two non-adjacent edges intersect.

    Quadratic in the edge count; intended for validating generated
    polygons at small depth, not for production-size inputs.
    """
    v = polygon.vertices
    n = len(v)
    a = v
    b = np.roll(v, -1, axis=0)

    def orient(px, py, qx, qy, rx, ry):
        return (qx - px) * (ry - py) - (qy - py) * (rx - px)

    for i in range(n):
        # skip adjacent edges (shared endpoints)
        js = np.arange(i + 2, n if i > 0 else n - 1)
        if len(js) == 0:
            continue
        o1 = orient(a[i, 0], a[i, 1], b[i, 0], b[i, 1], a[js, 0], a[js, 1])
        o2 = orient(a[i, 0], a[i, 1], b[i, 0], b[i, 1], b[js, 0], b[js, 1])
        o3 = orient(a[js, 0], a[js, 1], b[js, 0], b[js, 1], a[i, 0], a[i, 1])
        o4 = orient(a[js, 0], a[js, 1], b[js, 0], b[js, 1], b[i, 0], b[i, 1])
        if np.any((o1 * o2 < 0) & (o3 * o4 < 0)):
            return False
    return True


def hyperplane_support(domain):
    """Horizontal midline segment where the domain meets the line y = 0.

    Parameters
    ----------
    domain : Rect
        Must satisfy ymin < 0 < ymax.

    Returns
    -------
    SegmentSet
        Single segment from (xmin, 0) to (xmax, 0).
    """
    if not (domain.ymin < 0.0 < domain.ymax):
        raise UnsupportedGeometry(
            f"hyperplane support needs ymin < 0 < ymax, got "
            f"[{domain.ymin}, {domain.ymax}]")
    seg = np.array([[[domain.xmin, 0.0], [domain.xmax, 0.0]]])
    return SegmentSet(seg)


def write_support_csv(path, shape):
    """Serialize a Polygon or SegmentSet as a CSV vertex list.

    The first line is ``# polygon`` or ``# segments``; every following
    line is one ``x,y`` pair.  Segments are written as consecutive
    start/end vertex pairs.
    """
    if isinstance(shape, Polygon):
        tag = "# polygon"
        rows = shape.vertices
    elif isinstance(shape, SegmentSet):
        tag = "# segments"
        rows = shape.segments.reshape(-1, 2)
    else:
        raise TypeError(f"cannot serialize {type(shape).__name__}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(tag + "\n")
        for x, y in rows:
            fh.write((FLOAT_FMT % x) + "," + (FLOAT_FMT % y) + "\n")


def read_support_csv(path):
    """Inverse of :func:`write_support_csv`."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty support file")
    tag = lines[0]
    coords = np.array([[float(t) for t in ln.split(",")] for ln in lines[1:]])
    if tag == "# polygon":
        return Polygon(coords)
    if tag == "# segments":
        if len(coords) % 2 != 0:
            raise ValueError(f"{path}: segments file needs an even vertex count")
        return SegmentSet(coords.reshape(-1, 2, 2))
    raise ValueError(f"{path}: unknown header {tag!r}")
