"""Uniform right-triangle meshes, dof classification, and measure assembly.

The mesh splits every grid cell along the SW-NE diagonal, which keeps the
P1 stiffness matrix an M-matrix (5-point stencil).  Degrees of freedom are
partitioned into outer-boundary dofs B, support dofs S (positive measure
mass), and gap dofs I (zero mass).
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import EmptySupport, UnsupportedGeometry
from .geometry import FLOAT_FMT, SupportSpec, points_in_polygon

# Relative threshold on the lumped hat mass deciding support membership.
EPS_MASS_REL = 1e-14

# Tolerance (relative to h) for segment endpoints sitting on grid lines.
GRID_SNAP_REL = 1e-9

# Bounding-box padding for the region quadrature prefilter.
BBOX_PAD = 1e-9


@dataclass(frozen=True)
class Mesh:
    """Uniform triangulation of a square-cell rectangle.

    Attributes
    ----------
    domain : Rect
    n_cells : int
        Cells per axis.
    h : float
        Cell width (cells are square).
    vertices : ndarray, shape ((n_cells+1)**2, 2)
        Grid points, index iy * (n_cells+1) + ix.
    triangles : ndarray, shape (2*n_cells**2, 3)
        CCW vertex triples; even rows are the lower (SW, SE, NE) halves,
        odd rows the upper (SW, NE, NW) halves of each cell.
    boundary : ndarray
        Vertex indices on the outer boundary of the domain.
    """

    domain: Rect
    n_cells: int
    h: float
    vertices: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def vertex_id(self, ix, iy):
        return iy * (self.n_cells + 1) + ix


@dataclass(frozen=True)
class DofPartition:
    """Disjoint split of mesh vertices into boundary B, support S, gap I."""

    boundary: np.ndarray
    support: np.ndarray
    gap: np.ndarray

    @property
    def n_support(self):
        return len(self.support)

    @property
    def n_gap(self):
        return len(self.gap)

    @property
    def n_boundary(self):
        return len(self.boundary)


@dataclass(frozen=True)
class MassMatrix:
    """Measure mass matrix restricted to the support dofs.

    ``lumped`` holds the row sums of ``consistent`` (exactly), so the two
    agree on constants.  ``lumped_full`` keeps the pre-elimination hat
    masses of every mesh vertex; their sum is the total measure mass used
    for classification thresholds.
    """

    consistent: sp.csr_matrix
    lumped: np.ndarray
    lumped_full: np.ndarray
    total_mass: float
    partition: DofPartition


def build_uniform_mesh(domain, n_cells):
    """Triangulate ``domain`` with ``n_cells`` square cells per axis.

    Every cell is split along its SW-NE diagonal.  Raises
    UnsupportedGeometry when the rectangle does not admit square cells at
    this resolution.
    """
    if n_cells < 1 or int(n_cells) != n_cells:
        raise ValueError("n_cells must be a positive integer")
    n = int(n_cells)
    hx = domain.width / n
    hy = domain.height / n
    if abs(hx - hy) > 1e-12 * max(hx, hy):
        raise UnsupportedGeometry(
            f"cells must be square: width/n = {hx}, height/n = {hy}")
    h = hx
    N = n + 1

    xs = np.linspace(domain.xmin, domain.xmax, N)
    ys = np.linspace(domain.ymin, domain.ymax, N)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    ix, iy = np.meshgrid(np.arange(n), np.arange(n))
    ix, iy = ix.ravel(), iy.ravel()
    sw = iy * N + ix
    se = sw + 1
    ne = sw + N + 1
    nw = sw + N
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([sw, se, ne])
    triangles[1::2] = np.column_stack([sw, ne, nw])

    gx, gy = np.meshgrid(np.arange(N), np.arange(N))
    on_boundary = (gx == 0) | (gx == n) | (gy == 0) | (gy == n)
    boundary = np.where(on_boundary.ravel())[0]

    return Mesh(domain=domain, n_cells=n, h=h, vertices=vertices,
                triangles=triangles, boundary=boundary)


def _segment_grid_edges(mesh, segment):
    """Map one axis-aligned conforming segment to the mesh edges it covers.

    Returns (vertex index pairs, edge length); raises UnsupportedGeometry
    when the segment does not lie on mesh lines.
    """
    (x0, y0), (x1, y1) = segment
    h = mesh.h
    n = mesh.n_cells
    N = n + 1
    tol = GRID_SNAP_REL * h

    def grid_index(value, origin, label):
        t = (value - origin) / h
        j = int(round(t))
        if abs(t - j) * h > tol or j < 0 or j > n:
            raise UnsupportedGeometry(
                f"segment {label} coordinate {value} is not on a mesh line")
        return j

    if abs(y0 - y1) <= tol:
        jy = grid_index(y0, mesh.domain.ymin, "y")
        ia = grid_index(min(x0, x1), mesh.domain.xmin, "x")
        ib = grid_index(max(x0, x1), mesh.domain.xmin, "x")
        if ia == ib:
            raise UnsupportedGeometry("segment covers no mesh edge")
        base = jy * N
        left = base + np.arange(ia, ib)
        pairs = np.column_stack([left, left + 1])
    elif abs(x0 - x1) <= tol:
        jx = grid_index(x0, mesh.domain.xmin, "x")
        ja = grid_index(min(y0, y1), mesh.domain.ymin, "y")
        jb = grid_index(max(y0, y1), mesh.domain.ymin, "y")
        if ja == jb:
            raise UnsupportedGeometry("segment covers no mesh edge")
        low = np.arange(ja, jb) * N + jx
        pairs = np.column_stack([low, low + N])
    else:
        raise UnsupportedGeometry(
            "segments must be horizontal or vertical on mesh lines")
    return pairs, h


def validate_conformity(mesh, support):
    """Check that the mesh resolves the support exactly where required.

    Segment supports must coincide with mesh lines (this is what forces an
    even cell count for the y = 0 hyperplane on symmetric domains).
    Region supports carry no conformity requirement; their indicator is
    handled by quadrature.  Region and segment supports must lie inside
    the closure of the domain.
    """
    if support.kind == "segments":
        for seg in support.segments.segments:
            _segment_grid_edges(mesh, seg)
    elif support.kind == "region":
        xmin, xmax, ymin, ymax = support.polygon.bounding_box()
        d = mesh.domain
        tol = GRID_SNAP_REL * mesh.h
        if (xmin < d.xmin - tol or xmax > d.xmax + tol
                or ymin < d.ymin - tol or ymax > d.ymax + tol):
            raise UnsupportedGeometry("support polygon extends outside the domain")


def _subdivision_rule(order):
    """Barycentric data for midpoint-subdivision quadrature.

    Splits the reference triangle into 4**order congruent subtriangles and
    returns the barycentric coordinates (lam0, lam1, lam2) of every
    subtriangle barycenter, shape (4**order, 3).
    """
    m = 2 ** order
    lam1, lam2 = [], []
    for j in range(m):
        for i in range(m - j):
            lam1.append((3 * i + 1) / (3 * m))
            lam2.append((3 * j + 1) / (3 * m))
        for i in range(m - j - 1):
            lam1.append((3 * i + 2) / (3 * m))
            lam2.append((3 * j + 2) / (3 * m))
    lam1 = np.array(lam1)
    lam2 = np.array(lam2)
    lam0 = 1.0 - lam1 - lam2
    return np.column_stack([lam0, lam1, lam2])


def _region_element_masses(mesh, polygon, density, quad_order):
    """Per-triangle P1 mass contributions of the polygon indicator.

    Each triangle is split into 4**quad_order congruent subtriangles; the
    indicator is sampled at subtriangle barycenters (midpoint rule).  The
    rule integrates linear functions exactly, so the lumped hat masses are
    exact for fully covered triangles.
    """
    lam = _subdivision_rule(quad_order)
    n_sub = len(lam)
    sub_area = (mesh.h * mesh.h / 2.0) / n_sub
    # weights w[s] = sub_area * phi_i(bc_s) phi_j(bc_s)
    weights = sub_area * np.einsum("si,sj->sij", lam, lam)

    tri = mesh.triangles
    n_tri = len(tri)
    elem = np.zeros((n_tri, 3, 3))

    bbox = polygon.bounding_box()
    block = max(1, 2_000_000 // n_sub)
    for lo in range(0, n_tri, block):
        rows = np.arange(lo, min(lo + block, n_tri))
        corners = mesh.vertices[tri[rows]]          # (t, 3, 2)
        # barycenters from barycentric coordinates of the actual corners
        centers = np.einsum("si,tix->tsx", lam, corners)
        pts = centers.reshape(-1, 2)
        candidate = ((pts[:, 0] >= bbox[0] - BBOX_PAD) & (pts[:, 0] <= bbox[1] + BBOX_PAD)
                     & (pts[:, 1] >= bbox[2] - BBOX_PAD) & (pts[:, 1] <= bbox[3] + BBOX_PAD))
        inside = np.zeros(len(pts), dtype=bool)
        if candidate.any():
            inside[candidate] = points_in_polygon(pts[candidate], polygon)
        inside = inside.reshape(len(rows), n_sub)
        elem[rows] = density * np.einsum("ts,sij->tij", inside, weights)
    return elem


def _assemble_from_elements(mesh, elem):
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    m = sp.coo_matrix((elem.ravel(), (rows, cols)),
                      shape=(mesh.n_vertices, mesh.n_vertices))
    m = m.tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def _global_mass(mesh, support, quad_order):
    """Consistent mass matrix over all mesh vertices, plus hat masses."""
    if not isinstance(support, SupportSpec):
        raise TypeError("support must be a SupportSpec")
    validate_conformity(mesh, support)

    if support.kind == "full":
        area = mesh.h * mesh.h / 2.0
        base = support.density * (area / 12.0) * np.array(
            [[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]])
        elem = np.broadcast_to(base, (mesh.n_triangles, 3, 3))
        consistent = _assemble_from_elements(mesh, elem)
    elif support.kind == "region":
        if quad_order < 1 or quad_order > 6:
            raise ValueError("quad_order must be in 1..6")
        elem = _region_element_masses(mesh, support.polygon, support.density,
                                      quad_order)
        consistent = _assemble_from_elements(mesh, elem)
    else:
        rows, cols, data = [], [], []
        h = mesh.h
        for seg in support.segments.segments:
            pairs, _ = _segment_grid_edges(mesh, seg)
            d = support.density * h / 6.0
            for va, vb in pairs:
                rows.extend([va, va, vb, vb])
                cols.extend([va, vb, va, vb])
                data.extend([2.0 * d, d, d, 2.0 * d])
        consistent = sp.coo_matrix(
            (data, (rows, cols)),
            shape=(mesh.n_vertices, mesh.n_vertices)).tocsr()
        consistent.sum_duplicates()
        consistent.sort_indices()

    lumped_full = np.asarray(consistent.sum(axis=1)).ravel()
    total = float(lumped_full.sum())
    if total <= 0.0:
        raise EmptySupport("measure support carries no mass on this mesh")
    return consistent, lumped_full, total


def _partition_from_lumped(mesh, lumped_full, total):
    eps = EPS_MASS_REL * total
    is_boundary = np.zeros(mesh.n_vertices, dtype=bool)
    is_boundary[mesh.boundary] = True
    has_mass = lumped_full > eps
    support = np.where(~is_boundary & has_mass)[0]
    gap = np.where(~is_boundary & ~has_mass)[0]
    if len(support) == 0:
        raise EmptySupport("no interior vertex carries measure mass")
    return DofPartition(boundary=mesh.boundary, support=support, gap=gap)


def classify_dofs(mesh, support, quad_order=3):
    """Partition vertices into boundary B, support S, and gap I dofs.

    S collects the non-boundary vertices whose lumped hat mass exceeds
    the threshold EPS_MASS_REL * total mass.
    """
    _, lumped_full, total = _global_mass(mesh, support, quad_order)
    return _partition_from_lumped(mesh, lumped_full, total)


def assemble_mass(mesh, support, quad_order=3, partition=None):
    """Assemble the measure mass matrix restricted to the support dofs.

    Region supports use midpoint-subdivision quadrature for the indicator
    (4**quad_order subtriangles per element); segment supports use exact
    1-D hat integrals per covered mesh edge, density * h/6 * [[2,1],[1,2]].
    When ``partition`` is omitted it is derived from the same quadrature
    pass that produced the matrix.
    """
    consistent_full, lumped_full, total = _global_mass(mesh, support, quad_order)
    if partition is None:
        partition = _partition_from_lumped(mesh, lumped_full, total)
    S = partition.support
    consistent = consistent_full[S][:, S].tocsr()
    consistent.sum_duplicates()
    consistent.sort_indices()
    lumped = np.asarray(consistent.sum(axis=1)).ravel()
    return MassMatrix(consistent=consistent, lumped=lumped,
                      lumped_full=lumped_full, total_mass=total,
                      partition=partition)


def write_mesh_csv(mesh, vertices_path, triangles_path):
    """Export the mesh as a vertex table and a triangle table."""
    with open(vertices_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("vertex,x,y\n")
        for i, (x, y) in enumerate(mesh.vertices):
            fh.write(f"{i}," + (FLOAT_FMT % x) + "," + (FLOAT_FMT % y) + "\n")
    with open(triangles_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("triangle,v0,v1,v2\n")
        for i, (a, b, c) in enumerate(mesh.triangles):
            fh.write(f"{i},{a},{b},{c}\n")


def write_coo_csv(matrix, path):
    """Export a sparse matrix in row-major sorted coordinate text format."""
    m = matrix.tocsr().copy()
    m.sum_duplicates()
    m.sort_indices()
    coo = m.tocoo()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("row,col,value\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r},{c}," + (FLOAT_FMT % v) + "\n")
