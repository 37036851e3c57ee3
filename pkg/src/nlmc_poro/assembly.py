"""Fine-grid block operators: TPFA flow, exchange, P1 elasticity and couplings.

Unknowns are ordered ``(p_m, p_f, u_x, u_y)``: one matrix pressure per
triangle, one fracture pressure per fracture segment and two displacement
components per mesh vertex.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sps

from .coefficients import MaterialParams
from .geometry import CoarseGrid, FineMesh, FractureSet


class AssemblyError(RuntimeError):
    pass


def _tpfa(n: int, pairs: np.ndarray, trans: np.ndarray) -> sps.csr_matrix:
    """Symmetric two-point stencil with natural (no-flow) boundary."""
    i, j = pairs[:, 0], pairs[:, 1]
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([trans, trans, -trans, -trans])
    return sps.csr_matrix((vals, (rows, cols)), shape=(n, n))


def tpfa_matrix(mesh: FineMesh, b_m: float) -> sps.csr_matrix:
    """Matrix flow operator with ``T_ij = b_m |E_ij| / Delta_ij``."""
    trans = b_m * mesh.face_length / mesh.face_distance
    return _tpfa(mesh.num_cells, mesh.faces, trans)


def fracture_tpfa(fr: FractureSet, b_f: float) -> sps.csr_matrix:
    """Fracture flow operator with ``W_ln = b_f / Delta_ln``."""
    if np.any(fr.adjacency_distance <= 0):
        raise AssemblyError("zero distance between adjacent fracture segments")
    return _tpfa(fr.num_segments, fr.adjacency, b_f / fr.adjacency_distance)


def exchange_matrix(fr: FractureSet, n_cells: int, beta: float):
    """Matrix-fracture transfer blocks ``(Q_mm, Q_mf, Q_fm, Q_ff)``."""
    ns = fr.num_segments
    host = fr.seg_host
    seg = np.arange(ns)
    b = np.full(ns, float(beta))
    Q_mm = sps.csr_matrix((b, (host, host)), shape=(n_cells, n_cells))
    Q_ff = sps.csr_matrix((b, (seg, seg)), shape=(ns, ns))
    Q_mf = sps.csr_matrix((-b, (host, seg)), shape=(n_cells, ns))
    return Q_mm, Q_mf, Q_mf.T.tocsr(), Q_ff


def hat_gradients(mesh: FineMesh):
    """Per-triangle gradients of the three P1 hat functions, ``(dx, dy)``."""
    p = mesh.vertices[mesh.cells]
    x, y = p[..., 0], p[..., 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    if np.any(np.abs(det) <= 0):
        raise AssemblyError("degenerate triangle in mesh")
    dx = np.column_stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]]) / det[:, None]
    dy = np.column_stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]]) / det[:, None]
    return dx, dy


def elasticity_stiffness(mesh: FineMesh, mu: float, lam: float):
    """P1 stiffness blocks ``(D_x, D_y, D_xy)`` of ``lam div u div v + 2 mu eps:eps``.

    ``D_xy`` couples x-component test functions (rows) to y-component trial
    functions (columns), so the full operator is ``[[D_x, D_xy], [D_xy.T, D_y]]``.
    """
    dx, dy = hat_gradients(mesh)
    area = mesh.areas[:, None, None]
    bb = dx[:, :, None] * dx[:, None, :]
    cc = dy[:, :, None] * dy[:, None, :]
    bc = dx[:, :, None] * dy[:, None, :]
    kxx = area * ((lam + 2 * mu) * bb + mu * cc)
    kyy = area * ((lam + 2 * mu) * cc + mu * bb)
    kxy = area * (lam * bc + mu * bc.transpose(0, 2, 1))
    rows = np.repeat(mesh.cells, 3, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, 3)).ravel()
    n = mesh.num_vertices

    def mat(k):
        return sps.csr_matrix((k.ravel(), (rows, cols)), shape=(n, n))

    return mat(kxx), mat(kyy), mat(kxy)


def biot_coupling(mesh: FineMesh, alpha: float):
    """``B_m[i, j] = alpha * integral over cell i of d(psi_j)/dx`` (and ``/dy``)."""
    dx, dy = hat_gradients(mesh)
    rows = np.repeat(np.arange(mesh.num_cells), 3)
    cols = mesh.cells.ravel()
    w = alpha * mesh.areas[:, None]
    shape = (mesh.num_cells, mesh.num_vertices)
    B_mx = sps.csr_matrix(((w * dx).ravel(), (rows, cols)), shape=shape)
    B_my = sps.csr_matrix(((w * dy).ravel(), (rows, cols)), shape=shape)
    return B_mx, B_my


def segment_normals(fr: FractureSet) -> np.ndarray:
    """Unit normals: segment direction rotated 90 degrees counterclockwise."""
    d = fr.segments[:, 1] - fr.segments[:, 0]
    d = d / fr.seg_length[:, None]
    return np.column_stack([-d[:, 1], d[:, 0]])


def fracture_force_coupling(mesh: FineMesh, fr: FractureSet):
    """``B_f[l, j] = -integral over segment l of n_f psi_j`` (x and y parts).

    Two-point Gauss quadrature along the segment; the hat functions are those
    of the host triangle.
    """
    ns = fr.num_segments
    shape = (ns, mesh.num_vertices)
    if ns == 0:
        return sps.csr_matrix(shape), sps.csr_matrix(shape)
    normals = segment_normals(fr)
    tri = mesh.vertices[mesh.cells[fr.seg_host]]
    a, b = fr.segments[:, 0], fr.segments[:, 1]
    g = 0.5 / np.sqrt(3.0)
    phi = np.zeros((ns, 3))
    for t in (0.5 - g, 0.5 + g):
        pts = a + t * (b - a)
        phi += 0.5 * fr.seg_length[:, None] * _barycentric(tri, pts)
    rows = np.repeat(np.arange(ns), 3)
    cols = mesh.cells[fr.seg_host].ravel()
    B_fx = sps.csr_matrix(((-normals[:, :1] * phi).ravel(), (rows, cols)), shape=shape)
    B_fy = sps.csr_matrix(((-normals[:, 1:] * phi).ravel(), (rows, cols)), shape=shape)
    return B_fx, B_fy


def _barycentric(tri, pts):
    x1, y1 = tri[:, 0, 0], tri[:, 0, 1]
    x2, y2 = tri[:, 1, 0], tri[:, 1, 1]
    x3, y3 = tri[:, 2, 0], tri[:, 2, 1]
    det = (x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1)
    l2 = ((pts[:, 0] - x1) * (y3 - y1) - (x3 - x1) * (pts[:, 1] - y1)) / det
    l3 = ((x2 - x1) * (pts[:, 1] - y1) - (pts[:, 0] - x1) * (y2 - y1)) / det
    return np.column_stack([1.0 - l2 - l3, l2, l3])


@dataclass
class BlockOperator:
    A_m: sps.csr_matrix
    A_f: sps.csr_matrix
    Q_mm: sps.csr_matrix
    Q_mf: sps.csr_matrix
    Q_fm: sps.csr_matrix
    Q_ff: sps.csr_matrix
    D_x: sps.csr_matrix
    D_y: sps.csr_matrix
    D_xy: sps.csr_matrix
    B_mx: sps.csr_matrix
    B_my: sps.csr_matrix
    B_fx: sps.csr_matrix
    B_fy: sps.csr_matrix
    M_m: np.ndarray
    M_f: np.ndarray

    @property
    def sizes(self):
        nc, ns, nv = self.A_m.shape[0], self.A_f.shape[0], self.D_x.shape[0]
        return nc, ns, nv, nv

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.sizes)])

    def flow_operator(self) -> sps.csr_matrix:
        """``[[A_m + Q_mm, Q_mf], [Q_fm, A_f + Q_ff]]``."""
        return sps.bmat([[self.A_m + self.Q_mm, self.Q_mf],
                         [self.Q_fm, self.A_f + self.Q_ff]], format="csr")

    def elasticity_operator(self) -> sps.csr_matrix:
        return sps.bmat([[self.D_x, self.D_xy], [self.D_xy.T, self.D_y]], format="csr")

    def stiffness(self, tau: float) -> sps.csr_matrix:
        """Time-independent part ``A`` of the operator (everything but the mass)."""
        nc, ns, nv, _ = self.sizes
        shapes = (nc, ns, nv, nv)
        if self.B_mx.shape != (nc, nv) or self.B_fx.shape != (ns, nv) or self.Q_mf.shape != (nc, ns):
            raise AssemblyError("inconsistent block dimensions")
        zero_fu = sps.csr_matrix((shapes[1], nv))
        blocks = [
            [self.A_m + self.Q_mm, self.Q_mf, self.B_mx / tau, self.B_my / tau],
            [self.Q_fm, self.A_f + self.Q_ff, zero_fu, zero_fu],
            [-self.B_mx.T, -self.B_fx.T, self.D_x, self.D_xy],
            [-self.B_my.T, -self.B_fy.T, self.D_xy.T, self.D_y],
        ]
        return sps.bmat(blocks, format="csr")

    def mass(self) -> np.ndarray:
        nv = self.D_x.shape[0]
        return np.concatenate([self.M_m, self.M_f, np.zeros(2 * nv)])

    def dump(self, directory) -> list:
        """Write every block in matrix-market coordinate format."""
        from .io import write_matrix_market

        out = []
        for name in ("A_m", "A_f", "Q_mm", "Q_mf", "Q_fm", "Q_ff", "D_x", "D_y", "D_xy",
                     "B_mx", "B_my", "B_fx", "B_fy"):
            out.append(write_matrix_market(f"{directory}/{name}.mtx", getattr(self, name)))
        for name in ("M_m", "M_f"):
            out.append(write_matrix_market(f"{directory}/{name}.mtx", sps.diags(getattr(self, name))))
        return out


def assemble_blocks(mesh: FineMesh, fr: FractureSet, mp: MaterialParams) -> BlockOperator:
    mu, lam = mp.lame
    Q = exchange_matrix(fr, mesh.num_cells, mp.beta)
    D_x, D_y, D_xy = elasticity_stiffness(mesh, mu, lam)
    B_mx, B_my = biot_coupling(mesh, mp.alpha)
    B_fx, B_fy = fracture_force_coupling(mesh, fr)
    return BlockOperator(
        tpfa_matrix(mesh, mp.b_m), fracture_tpfa(fr, mp.b_f), *Q,
        D_x, D_y, D_xy, B_mx, B_my, B_fx, B_fy,
        mp.a_m * mesh.areas, mp.a_f * fr.seg_length,
    )


def roller_constraints(mesh: FineMesh):
    """Zero normal displacement on every side: ``(dofs, values)``.

    Dof numbers are global indices into the ``(p_m, p_f, u_x, u_y)`` vector
    minus the pressure offset, i.e. ``u_x`` of vertex ``v`` is ``v`` and
    ``u_y`` is ``nv + v``.
    """
    nv = mesh.num_vertices
    t = mesh.boundary_vertex_tags
    ux = np.union1d(t["left"], t["right"])
    uy = np.union1d(t["bottom"], t["top"]) + nv
    dofs = np.concatenate([ux, uy])
    return dofs, np.zeros(dofs.size)


def source_vector(mesh: FineMesh, cg: CoarseGrid, source_cells, q: float) -> np.ndarray:
    """Matrix source ``F_m``: rate ``q`` per listed coarse cell, area weighted."""
    F = np.zeros(mesh.num_cells)
    for c in source_cells:
        if not 0 <= c < cg.num_cells:
            raise AssemblyError(f"source coarse cell {c} out of range")
        mask = cg.fine_to_coarse == c
        F[mask] += q * mesh.areas[mask] / mesh.areas[mask].sum()
    return F


def default_source_cells(cg: CoarseGrid):
    """Coarse cells at 25% and 75% along the domain diagonal."""
    cells = []
    for frac in (0.25, 0.75):
        I = min(int(frac * cg.Nx), cg.Nx - 1)
        J = min(int(frac * cg.Ny), cg.Ny - 1)
        cells.append(int(cg.index(I, J)))
    return cells


def apply_dirichlet(matrix: sps.csr_matrix, dofs: np.ndarray, values: np.ndarray):
    """Row/column elimination; returns the constrained matrix and the load lift.

    The returned ``lift`` must be subtracted from every right-hand side before
    the constrained entries are overwritten with ``values``.
    """
    n = matrix.shape[0]
    g = np.zeros(n)
    g[dofs] = values
    lift = matrix @ g
    keep = np.ones(n)
    keep[dofs] = 0.0
    K = sps.diags(keep)
    fixed = sps.diags(1.0 - keep)
    constrained = (K @ matrix @ K + fixed).tocsr()
    constrained.eliminate_zeros()
    return constrained, lift


@dataclass
class AssembledSystem:
    """Fine-grid system ``(M / tau + A) y = F(prev)`` with displacement constraints."""

    operator: BlockOperator
    stiffness: sps.csr_matrix
    mass: np.ndarray
    tau: float
    source: np.ndarray
    dirichlet_dofs: np.ndarray
    dirichlet_values: np.ndarray
    lhs: sps.csr_matrix
    lift: np.ndarray

    @property
    def size(self) -> int:
        return self.lhs.shape[0]

    @property
    def offsets(self):
        return self.operator.offsets

    @cached_property
    def biot_block(self) -> sps.csr_matrix:
        """Pressure-row, displacement-column block of ``A`` (includes ``1/tau``)."""
        o = self.offsets
        return self.stiffness[: o[2], o[2]:]

    @cached_property
    def flow_stiffness(self) -> sps.csr_matrix:
        """``A`` without its pressure-row Biot block."""
        o = self.offsets
        return _drop_block(self.stiffness, o[2])

    def rhs(self, prev: np.ndarray) -> np.ndarray:
        """Right-hand side for the step following state ``prev``."""
        op = self.operator
        o = self.offsets
        F = self.source.copy()
        F[: o[2]] += self.mass[: o[2]] * prev[: o[2]] / self.tau
        F[: o[1]] += (op.B_mx @ prev[o[2]:o[3]] + op.B_my @ prev[o[3]:o[4]]) / self.tau
        F -= self.lift
        F[self.dirichlet_dofs] = self.dirichlet_values
        return F

    def steady_mechanics_rhs(self, pressure_state: np.ndarray) -> np.ndarray:
        """Load on the displacement rows from the pressures in ``pressure_state``."""
        o = self.offsets
        op = self.operator
        F = np.zeros(self.size)
        F[o[2]:o[3]] = op.B_mx.T @ pressure_state[: o[1]] + op.B_fx.T @ pressure_state[o[1]:o[2]]
        F[o[3]:] = op.B_my.T @ pressure_state[: o[1]] + op.B_fy.T @ pressure_state[o[1]:o[2]]
        return F


def assemble_system(mesh: FineMesh, fr: FractureSet, cg: CoarseGrid, mp: MaterialParams,
                    tau: float | None = None, dirichlet=None, source_cells=None) -> AssembledSystem:
    """Assemble the full fine system.

    Args:
        dirichlet: ``(dofs, values)`` on the displacement unknowns, indexed as in
            :func:`roller_constraints`. Defaults to rollers on all sides.
        source_cells: Coarse cells receiving a source of rate ``mp.q``. Defaults
            to :func:`default_source_cells`; pass an empty list for no source.
    """
    tau = mp.tau if tau is None else tau
    op = assemble_blocks(mesh, fr, mp)
    if dirichlet is None:
        dirichlet = roller_constraints(mesh)
    if source_cells is None:
        source_cells = default_source_cells(cg)
    o = op.offsets
    dofs = np.asarray(dirichlet[0], dtype=np.int64) + o[2]
    values = np.asarray(dirichlet[1], dtype=float)
    A = op.stiffness(tau)
    mass = op.mass()
    lhs_full = (A + sps.diags(mass / tau)).tocsr()
    lhs, lift = apply_dirichlet(lhs_full, dofs, values)
    source = np.zeros(o[-1])
    source[: o[1]] = source_vector(mesh, cg, source_cells, mp.q)
    return AssembledSystem(op, A, mass, tau, source, dofs, values, lhs, lift)


def fine_dof_count(mesh: FineMesh, fr: FractureSet) -> int:
    return mesh.num_cells + fr.num_segments + 2 * mesh.num_vertices


def _drop_block(A, n_p: int) -> sps.csr_matrix:
    """Copy of ``A`` without its pressure-row, displacement-column block."""
    A = sps.coo_matrix(A)
    keep = ~((A.row < n_p) & (A.col >= n_p))
    return sps.csr_matrix((A.data[keep], (A.row[keep], A.col[keep])), shape=A.shape)
