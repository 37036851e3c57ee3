"""Fine triangulation, embedded fracture mesh and coarse partition.

The fine grid is a structured triangulation of a rectangle: every grid
square is split along its lower-left to upper-right diagonal. Fractures are
polylines overlaid on this grid and cut at every triangle edge they cross,
which gives a one-dimensional mesh whose segments each live in exactly one
host triangle.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps

logger = logging.getLogger(__name__)

# Relative length (in units of the fine cell size) below which a piece of a
# fracture is merged into its neighbour.
MIN_SEGMENT_FRACTION = 1e-12


class GeometryError(ValueError):
    """Invalid mesh or fracture input."""


@dataclass(frozen=True)
class FineMesh:
    """Structured triangular mesh of ``[0, width] x [0, height]``.

    Square ``(i, j)`` carries the triangles ``2q`` (below the diagonal) and
    ``2q + 1`` (above it), with ``q = j * nx + i``.
    """

    nx: int
    ny: int
    width: float
    height: float
    vertices: np.ndarray
    cells: np.ndarray
    areas: np.ndarray
    centroids: np.ndarray
    faces: np.ndarray
    face_length: np.ndarray
    face_distance: np.ndarray
    boundary_vertex_tags: dict

    @property
    def hx(self) -> float:
        return self.width / self.nx

    @property
    def hy(self) -> float:
        return self.height / self.ny

    @property
    def num_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    def vertex_index(self, i, j):
        return np.asarray(j) * (self.nx + 1) + np.asarray(i)

    def locate(self, point, tol: float = 1e-12) -> int:
        """Smallest-index triangle whose closure contains ``point``."""
        x, y = float(point[0]), float(point[1])
        ci = min(max(int(np.floor(x / self.hx)), 0), self.nx - 1)
        cj = min(max(int(np.floor(y / self.hy)), 0), self.ny - 1)
        candidates = []
        for j in range(max(cj - 1, 0), min(cj + 2, self.ny)):
            for i in range(max(ci - 1, 0), min(ci + 2, self.nx)):
                q = j * self.nx + i
                candidates.extend((2 * q, 2 * q + 1))
        for c in sorted(candidates):
            if _in_triangle(self.vertices[self.cells[c]], (x, y), tol):
                return c
        raise GeometryError(f"point {point} lies outside the mesh")


def _in_triangle(tri, p, tol) -> bool:
    (x1, y1), (x2, y2), (x3, y3) = tri
    det = (x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1)
    l2 = ((p[0] - x1) * (y3 - y1) - (x3 - x1) * (p[1] - y1)) / det
    l3 = ((x2 - x1) * (p[1] - y1) - (p[0] - x1) * (y2 - y1)) / det
    l1 = 1.0 - l2 - l3
    return min(l1, l2, l3) >= -tol


def build_fine_mesh(nx: int, ny: int, width: float = 1.0, height: float = 1.0) -> FineMesh:
    """Build the structured fine triangulation."""
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise GeometryError(f"subdivision counts must be positive integers, got {nx}, {ny}")
    if not (width > 0 and height > 0):
        raise GeometryError(f"domain size must be positive, got {width} x {height}")
    nx, ny = int(nx), int(ny)
    hx, hy = width / nx, height / ny

    xs = np.arange(nx + 1) * hx
    ys = np.arange(ny + 1) * hy
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    jj, ii = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    v00 = jj * (nx + 1) + ii
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    cells = np.empty((2 * nx * ny, 3), dtype=np.int64)
    cells[0::2] = np.column_stack([v00, v10, v11])
    cells[1::2] = np.column_stack([v00, v11, v01])

    p = vertices[cells]
    areas = 0.5 * np.abs(
        (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
    )
    centroids = p.mean(axis=1)

    q = jj * nx + ii
    face_a, face_b, face_len = [], [], []
    # diagonal inside each square
    face_a.append(2 * q)
    face_b.append(2 * q + 1)
    face_len.append(np.full(q.size, np.hypot(hx, hy)))
    # vertical edges: lower triangle of (i, j) | upper triangle of (i + 1, j)
    m = ii < nx - 1
    face_a.append(2 * q[m])
    face_b.append(2 * (q[m] + 1) + 1)
    face_len.append(np.full(m.sum(), hy))
    # horizontal edges: upper triangle of (i, j) | lower triangle of (i, j + 1)
    m = jj < ny - 1
    face_a.append(2 * q[m] + 1)
    face_b.append(2 * (q[m] + nx))
    face_len.append(np.full(m.sum(), hx))

    faces = np.column_stack([np.concatenate(face_a), np.concatenate(face_b)])
    order = np.lexsort((faces[:, 1], faces[:, 0]))
    faces = faces[order]
    face_length = np.concatenate(face_len)[order]
    face_distance = np.linalg.norm(centroids[faces[:, 0]] - centroids[faces[:, 1]], axis=1)

    vi = np.arange(vertices.shape[0])
    col, row = vi % (nx + 1), vi // (nx + 1)
    tags = {
        "left": vi[col == 0],
        "right": vi[col == nx],
        "bottom": vi[row == 0],
        "top": vi[row == ny],
    }
    return FineMesh(nx, ny, float(width), float(height), vertices, cells, areas,
                    centroids, faces, face_length, face_distance, tags)


@dataclass(frozen=True)
class FractureSet:
    """Fracture networks cut into per-triangle segments.

    ``segments`` has shape ``(n, 2, 2)``: start and end point of every piece.
    ``adjacency`` lists pairs ``(l, n)`` of segments of the same network that
    share an endpoint, with ``adjacency_distance`` the distance between their
    midpoints.
    """

    networks: list
    seg_network: np.ndarray
    segments: np.ndarray
    seg_length: np.ndarray
    seg_host: np.ndarray
    adjacency: np.ndarray
    adjacency_distance: np.ndarray
    dropped: list = field(default_factory=list)

    @property
    def num_segments(self) -> int:
        return self.seg_length.size

    @property
    def num_networks(self) -> int:
        return len(self.networks)

    @property
    def midpoints(self) -> np.ndarray:
        return self.segments.mean(axis=1)


def _clip_to_box(p, q, width, height):
    """Liang-Barsky clipping of segment ``pq`` to the domain, or ``None``."""
    d = q - p
    t0, t1 = 0.0, 1.0
    for pk, qk in ((-d[0], p[0]), (d[0], width - p[0]), (-d[1], p[1]), (d[1], height - p[1])):
        if pk == 0.0:
            if qk < 0.0:
                return None
            continue
        r = qk / pk
        if pk < 0.0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return None
    a = p if t0 == 0.0 else p + t0 * d
    b = q if t1 == 1.0 else p + t1 * d
    return a, b


def _grid_crossings(a, b, hx, hy):
    """Parameters in (0, 1) where segment ``ab`` crosses a mesh edge line.

    Mesh edges lie on the three line families ``x/hx = k``, ``y/hy = k`` and
    ``x/hx - y/hy = k`` for integer ``k``.
    """
    ts = []
    fa = (a[0] / hx, a[1] / hy, a[0] / hx - a[1] / hy)
    fb = (b[0] / hx, b[1] / hy, b[0] / hx - b[1] / hy)
    for u, v in zip(fa, fb):
        if u == v:
            continue
        lo, hi = min(u, v), max(u, v)
        ks = np.arange(np.floor(lo) + 1, np.ceil(hi))
        ts.append((ks - u) / (v - u))
    if not ts:
        return np.empty(0)
    t = np.concatenate(ts)
    return t[(t > 0.0) & (t < 1.0)]


def _edge_intersection(p1, p2, q1, q2):
    """Parameters ``(s, t)`` of the proper crossing of two edges, or ``None``."""
    r = p2 - p1
    d = q2 - q1
    den = r[0] * d[1] - r[1] * d[0]
    if den == 0.0:
        return None
    w = q1 - p1
    s = (w[0] * d[1] - w[1] * d[0]) / den
    t = (w[0] * r[1] - w[1] * r[0]) / den
    if 0.0 <= s <= 1.0 and 0.0 <= t <= 1.0:
        return s, t
    return None


def embed_fractures(mesh: FineMesh, polylines, network_ids=None) -> FractureSet:
    """Cut fracture polylines at every triangle edge of ``mesh``.

    Args:
        mesh: Fine mesh.
        polylines: Sequence of polylines, each an array-like of shape ``(k, 2)``.
        network_ids: Optional network label per polyline. Polylines that share
            a label form one network and are additionally split where they
            cross each other, so that the crossing connects them. By default
            every polyline is its own network.

    Returns:
        The fracture set. Networks with no part inside the domain are dropped
        and reported in ``FractureSet.dropped``.
    """
    polylines = [np.asarray(pl, dtype=float).reshape(-1, 2) for pl in polylines]
    if network_ids is None:
        network_ids = list(range(len(polylines)))
    if len(network_ids) != len(polylines):
        raise GeometryError("one network id per polyline is required")

    hx, hy = mesh.hx, mesh.hy
    tol = MIN_SEGMENT_FRACTION * min(hx, hy)

    # clipped edges grouped per input network label
    groups: dict = {}
    for pl, nid in zip(polylines, network_ids):
        if pl.shape[0] < 2:
            raise GeometryError("a polyline needs at least two points")
        for k in range(pl.shape[0] - 1):
            p, q = pl[k], pl[k + 1]
            if np.hypot(*(q - p)) <= tol:
                raise GeometryError(f"zero-length fracture edge at {p}")
            clipped = _clip_to_box(p, q, mesh.width, mesh.height)
            if clipped is None or np.hypot(*(clipped[1] - clipped[0])) <= tol:
                continue
            groups.setdefault(nid, []).append(clipped)

    seen = []
    for nid in network_ids:
        if nid not in seen:
            seen.append(nid)
    dropped = [nid for nid in seen if nid not in groups]
    for nid in dropped:
        logger.warning("fracture network %s lies outside the domain and is dropped", nid)

    networks, seg_net, seg_pts = [], [], []
    for nid in (n for n in seen if n in groups):
        edges = groups[nid]
        net = len(networks)
        networks.append([np.array([a, b]) for a, b in edges])
        extra = [[] for _ in edges]
        for e in range(len(edges)):
            for f in range(e + 1, len(edges)):
                hit = _edge_intersection(edges[e][0], edges[e][1], edges[f][0], edges[f][1])
                if hit is not None:
                    extra[e].append(hit[0])
                    extra[f].append(hit[1])
        for (a, b), more in zip(edges, extra):
            length = np.hypot(*(b - a))
            t = np.concatenate([[0.0], _grid_crossings(a, b, hx, hy), more, [1.0]])
            t = np.unique(np.clip(t, 0.0, 1.0))
            keep = [0]
            for k in range(1, t.size):
                if (t[k] - t[keep[-1]]) * length > tol:
                    keep.append(k)
            if keep[-1] != t.size - 1:
                keep[-1] = t.size - 1
            t = t[keep]
            pts = a[None, :] + t[:, None] * (b - a)[None, :]
            pts[0], pts[-1] = a, b
            for k in range(t.size - 1):
                seg_net.append(net)
                seg_pts.append((pts[k], pts[k + 1]))

    if seg_pts:
        segments = np.array(seg_pts, dtype=float)
    else:
        segments = np.empty((0, 2, 2))
    seg_network = np.array(seg_net, dtype=np.int64)
    seg_length = np.linalg.norm(segments[:, 1] - segments[:, 0], axis=1)
    mids = segments.mean(axis=1)
    seg_host = np.array([mesh.locate(m) for m in mids], dtype=np.int64)

    adjacency, adjacency_distance = _segment_adjacency(segments, seg_network, tol)
    return FractureSet(networks, seg_network, segments, seg_length, seg_host,
                       adjacency, adjacency_distance, dropped)


def _segment_adjacency(segments, seg_network, tol):
    """Pairs of same-network segments sharing an endpoint."""
    n = segments.shape[0]
    if n == 0:
        return np.empty((0, 2), dtype=np.int64), np.empty(0)
    # snap endpoints to a lattice much finer than any retained segment
    keys = np.round(segments.reshape(-1, 2) / (tol * 1e3)).astype(np.int64)
    buckets: dict = {}
    for idx, key in enumerate(map(tuple, keys)):
        buckets.setdefault((seg_network[idx // 2],) + key, []).append(idx // 2)
    pairs = set()
    for members in buckets.values():
        members = sorted(set(members))
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                pairs.add((members[a], members[b]))
    if not pairs:
        return np.empty((0, 2), dtype=np.int64), np.empty(0)
    adjacency = np.array(sorted(pairs), dtype=np.int64)
    mids = segments.mean(axis=1)
    dist = np.linalg.norm(mids[adjacency[:, 0]] - mids[adjacency[:, 1]], axis=1)
    return adjacency, dist


@dataclass(frozen=True)
class CoarseGrid:
    """Uniform coarse partition conforming to the fine mesh.

    ``continua[j]`` lists the local fracture networks of coarse cell ``j`` as
    arrays of segment ids; ``num_continua[j]`` is their count.
    """

    Nx: int
    Ny: int
    width: float
    height: float
    fine_to_coarse: np.ndarray
    seg_to_coarse: np.ndarray
    continua: list
    seg_continuum: np.ndarray
    continuum_length: list

    @property
    def num_cells(self) -> int:
        return self.Nx * self.Ny

    @property
    def Hx(self) -> float:
        return self.width / self.Nx

    @property
    def Hy(self) -> float:
        return self.height / self.Ny

    @property
    def cell_area(self) -> np.ndarray:
        return np.full(self.num_cells, self.Hx * self.Hy)

    @property
    def num_continua(self) -> np.ndarray:
        return np.array([len(c) for c in self.continua], dtype=np.int64)

    @property
    def num_fracture_dofs(self) -> int:
        return int(self.num_continua.sum())

    @property
    def dof_count(self) -> int:
        return 3 * self.num_cells + self.num_fracture_dofs

    def index(self, I, J):
        return J * self.Nx + I

    def bounds(self, c: int):
        I, J = c % self.Nx, c // self.Nx
        return (I * self.Hx, (I + 1) * self.Hx, J * self.Hy, (J + 1) * self.Hy)

    def fracture_offsets(self) -> np.ndarray:
        """Start index of each coarse cell's continua in the fracture DOF block."""
        return np.concatenate([[0], np.cumsum(self.num_continua)])


def _union_find_components(n, pairs):
    parent = np.arange(n)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    return np.array([find(a) for a in range(n)], dtype=np.int64)


def build_coarse_grid(mesh: FineMesh, fractures: FractureSet, Nx: int, Ny: int) -> CoarseGrid:
    """Partition the domain into ``Nx x Ny`` coarse cells and find local continua."""
    if Nx < 1 or Ny < 1 or mesh.nx % Nx or mesh.ny % Ny:
        raise GeometryError(
            f"fine grid {mesh.nx}x{mesh.ny} does not conform to coarse grid {Nx}x{Ny}")
    rx, ry = mesh.nx // Nx, mesh.ny // Ny
    sq = np.arange(mesh.num_cells) // 2
    si, sj = sq % mesh.nx, sq // mesh.nx
    fine_to_coarse = (sj // ry) * Nx + si // rx

    seg_to_coarse = fine_to_coarse[fractures.seg_host]
    n_seg = fractures.num_segments
    adj = fractures.adjacency
    if adj.size:
        inside = seg_to_coarse[adj[:, 0]] == seg_to_coarse[adj[:, 1]]
        root = _union_find_components(n_seg, adj[inside])
    else:
        root = np.arange(n_seg)

    continua = [[] for _ in range(Nx * Ny)]
    seg_continuum = np.full(n_seg, -1, dtype=np.int64)
    by_root: dict = {}
    for s in range(n_seg):
        by_root.setdefault(root[s], []).append(s)
    # components ordered by their smallest segment id within each coarse cell
    for r in sorted(by_root, key=lambda r: by_root[r][0]):
        members = np.array(by_root[r], dtype=np.int64)
        c = seg_to_coarse[members[0]]
        seg_continuum[members] = len(continua[c])
        continua[c].append(members)
    lengths = [np.array([fractures.seg_length[m].sum() for m in cc]) for cc in continua]
    return CoarseGrid(Nx, Ny, mesh.width, mesh.height, fine_to_coarse, seg_to_coarse,
                      continua, seg_continuum, lengths)


def oversample(cg: CoarseGrid, i: int, s: int) -> np.ndarray:
    """Coarse cells within Chebyshev distance ``s`` of cell ``i`` (sorted)."""
    if s < 0:
        raise GeometryError("oversampling layer count must be non-negative")
    I, J = i % cg.Nx, i // cg.Nx
    Is = np.arange(max(I - s, 0), min(I + s, cg.Nx - 1) + 1)
    Js = np.arange(max(J - s, 0), min(J + s, cg.Ny - 1) + 1)
    return (Js[:, None] * cg.Nx + Is[None, :]).ravel()


def coarse_vertex_weights(mesh: FineMesh, cg: CoarseGrid) -> sps.csr_matrix:
    """Matrix ``W[j, v] = integral of hat function v over coarse cell j``.

    Exact for P1 fields because the fine mesh conforms to the coarse grid.
    """
    rows = np.repeat(cg.fine_to_coarse, 3)
    cols = mesh.cells.ravel()
    vals = np.repeat(mesh.areas / 3.0, 3)
    return sps.csr_matrix((vals, (rows, cols)), shape=(cg.num_cells, mesh.num_vertices))
