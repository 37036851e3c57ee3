"""Nonlocal multicontinuum upscaling.

For every coarse cell ``K_i`` one basis function is computed per continuum
(the matrix, each local fracture network, and the two displacement
components). Each basis minimises the local flow or elastic energy on the
oversampled region ``K_i^+`` subject to integral constraints: unit integral
on its own continuum in ``K_i`` and zero integral on every other continuum of
every coarse cell in the region. The minimisers are found from the
saddle-point system of the constrained quadratic problem.

The constraints are integrals, so a raw basis takes the value ``1/|K_i|`` on
average over its home continuum. The projection stores each basis multiplied
by the measure of its home continuum, which makes the coarse unknowns
continuum averages; :attr:`ProjectionOperator.scale` holds those measures.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sps

from .assembly import AssembledSystem, BlockOperator, _drop_block
from .coefficients import MaterialParams
from .geometry import CoarseGrid, FineMesh, FractureSet, coarse_vertex_weights, oversample
from .solver import DirectSolver, SimulationState, SolverError

logger = logging.getLogger(__name__)

X, Y = 0, 1


class BasisError(RuntimeError):
    pass


@dataclass
class LocalProblem:
    """Restricted operators and constraints on one oversampled region.

    Flow unknowns are the region's triangles followed by its fracture
    segments (``flow_dofs`` holds their indices in the global pressure
    vector). Displacement unknowns are the region's free ``u_x`` then
    ``u_y`` vertex dofs (``disp_dofs`` indexes the global ``(u_x, u_y)``
    vector). Constraint row ``k < n_coarse`` is the matrix (or displacement)
    integral over ``region[k]``; flow rows beyond that are the fracture
    continua, listed in ``continuum_rows``.
    """

    home: int
    region: np.ndarray
    flow_dofs: np.ndarray
    n_flow_cells: int
    A_flow: sps.csr_matrix
    C_flow: sps.csr_matrix
    continuum_rows: dict
    disp_dofs: np.ndarray
    n_disp_x: int
    A_disp: sps.csr_matrix
    S_disp: sps.csr_matrix
    _flow_solver: DirectSolver | None = field(default=None, repr=False)
    _disp_solver: DirectSolver | None = field(default=None, repr=False)

    @property
    def n_coarse(self) -> int:
        return self.region.size

    @property
    def home_position(self) -> int:
        return int(np.searchsorted(self.region, self.home))

    def flow_saddle(self) -> sps.csr_matrix:
        n_c = self.C_flow.shape[0]
        return sps.bmat([[self.A_flow, self.C_flow.T], [self.C_flow, sps.csr_matrix((n_c, n_c))]],
                        format="csc")

    def disp_saddle(self) -> sps.csr_matrix:
        n_c = self.S_disp.shape[0]
        return sps.bmat([[self.A_disp, self.S_disp.T], [self.S_disp, sps.csr_matrix((n_c, n_c))]],
                        format="csc")


def _saddle_solve(get_solver, set_solver, matrix_fn, n, rhs_rows, n_rows):
    solver = get_solver()
    if solver is None:
        try:
            solver = DirectSolver(matrix_fn())
        except SolverError as exc:
            raise BasisError(f"singular local saddle-point system: {exc}") from exc
        set_solver(solver)
    rhs = np.zeros((n + n_rows, len(rhs_rows)))
    for k, r in enumerate(rhs_rows):
        rhs[n + r, k] = 1.0
    try:
        sol = solver.solve(rhs)
    except SolverError as exc:
        raise BasisError(f"singular local saddle-point system: {exc}") from exc
    return sol[:n]


class NLMCBuilder:
    """Region extraction and basis computation on a fixed fine discretisation.

    Args:
        mesh, fractures, cg: Geometry.
        operator: Fine block operator; only the flow and elasticity blocks are
            used, the Biot couplings are ignored for basis construction.
        displacement_dirichlet: Global displacement dofs held at zero (indices
            into the ``(u_x, u_y)`` vector), e.g. from
            :func:`~nlmc_poro.assembly.roller_constraints`.
    """

    def __init__(self, mesh: FineMesh, fractures: FractureSet, cg: CoarseGrid,
                 operator: BlockOperator, displacement_dirichlet=()):
        if mesh.nx // cg.Nx < 1 or mesh.ny // cg.Ny < 1:
            raise BasisError("coarse grid finer than fine grid")
        self.mesh, self.fr, self.cg, self.op = mesh, fractures, cg, operator
        self.rx, self.ry = mesh.nx // cg.Nx, mesh.ny // cg.Ny
        self.n_cells = mesh.num_cells
        self.n_segs = fractures.num_segments
        self.nv = mesh.num_vertices
        self.flow = operator.flow_operator()
        self.elastic = operator.elasticity_operator()
        self.W = coarse_vertex_weights(mesh, cg).tocsr()

        self.cells_of = [[] for _ in range(cg.num_cells)]
        for c, k in enumerate(cg.fine_to_coarse):
            self.cells_of[k].append(c)
        self.cells_of = [np.array(v, dtype=np.int64) for v in self.cells_of]
        self.segs_of = [[] for _ in range(cg.num_cells)]
        for s, k in enumerate(cg.seg_to_coarse):
            self.segs_of[k].append(s)
        self.segs_of = [np.array(v, dtype=np.int64) for v in self.segs_of]

        vi = np.arange(self.nv)
        self.v_i, self.v_j = vi % (mesh.nx + 1), vi // (mesh.nx + 1)
        fixed = np.zeros(2 * self.nv, dtype=bool)
        fixed[np.asarray(displacement_dirichlet, dtype=np.int64)] = True
        self.fixed = fixed

    def local_problem(self, i: int, s: int) -> LocalProblem:
        cg = self.cg
        region = np.sort(oversample(cg, i, s))
        pos = {int(k): n for n, k in enumerate(region)}

        cells = np.sort(np.concatenate([self.cells_of[k] for k in region]))
        segs = np.sort(np.concatenate([self.segs_of[k] for k in region]))
        flow_dofs = np.concatenate([cells, self.n_cells + segs])
        A_flow = self.flow[flow_dofs][:, flow_dofs].tocsr()

        continuum_rows = {}
        row = region.size
        for k in region:
            for l in range(len(cg.continua[k])):
                continuum_rows[(int(k), l)] = row
                row += 1
        n_rows = row
        c_rows = np.concatenate([
            [pos[int(k)] for k in cg.fine_to_coarse[cells]],
            [continuum_rows[(int(cg.seg_to_coarse[sg]), int(cg.seg_continuum[sg]))] for sg in segs],
        ]).astype(np.int64)
        c_vals = np.concatenate([self.mesh.areas[cells], self.fr.seg_length[segs]])
        C_flow = sps.csr_matrix((c_vals, (c_rows, np.arange(flow_dofs.size))),
                                shape=(n_rows, flow_dofs.size))

        I = region % cg.Nx
        J = region // cg.Nx
        i0, i1 = I.min() * self.rx, (I.max() + 1) * self.rx
        j0, j1 = J.min() * self.ry, (J.max() + 1) * self.ry
        vi, vj = self.v_i, self.v_j
        inside = (vi >= i0) & (vi <= i1) & (vj >= j0) & (vj <= j1)
        # region sides interior to the domain carry zero Dirichlet data
        on_cut = (((vi == i0) & (i0 > 0)) | ((vi == i1) & (i1 < self.mesh.nx))
                  | ((vj == j0) & (j0 > 0)) | ((vj == j1) & (j1 < self.mesh.ny)))
        verts = np.flatnonzero(inside & ~on_cut)
        vx = verts[~self.fixed[verts]]
        vy = verts[~self.fixed[self.nv + verts]]
        disp_dofs = np.concatenate([vx, self.nv + vy])
        A_disp = self.elastic[disp_dofs][:, disp_dofs].tocsr()
        Wr = self.W[region]
        S_disp = sps.block_diag([Wr[:, vx], Wr[:, vy]], format="csr")

        return LocalProblem(int(i), region, flow_dofs, cells.size, A_flow, C_flow, continuum_rows,
                            disp_dofs, vx.size, A_disp, S_disp)


def build_flow_constraints(lp: LocalProblem):
    """Split the flow constraints into matrix rows ``C_m`` and fracture rows ``C_f``.

    ``C_m`` acts on the region's triangles, ``C_f`` on its fracture segments.
    """
    n_k, n_c = lp.n_coarse, lp.n_flow_cells
    return lp.C_flow[:n_k, :n_c].tocsr(), lp.C_flow[n_k:, n_c:].tocsr()


def solve_pressure_basis(lp: LocalProblem, targets) -> np.ndarray:
    """Flow bases for the given target continua of the home cell.

    Args:
        targets: Sequence of continuum ids: ``0`` for the matrix, ``l + 1`` for
            the ``l``-th local fracture network of the home cell.

    Returns:
        Array of shape ``(len(flow_dofs), len(targets))``; column ``k`` is the
        basis restricted to the region (it vanishes elsewhere).
    """
    rows = []
    for t in targets:
        if t == 0:
            rows.append(lp.home_position)
        else:
            key = (lp.home, t - 1)
            if key not in lp.continuum_rows:
                raise BasisError(f"coarse cell {lp.home} has no fracture continuum {t - 1}")
            rows.append(lp.continuum_rows[key])

    def setter(s):
        lp._flow_solver = s

    return _saddle_solve(lambda: lp._flow_solver, setter, lp.flow_saddle,
                         lp.flow_dofs.size, rows, lp.C_flow.shape[0])


def solve_displacement_basis(lp: LocalProblem, components=(X, Y)) -> np.ndarray:
    """Displacement bases (``X`` and/or ``Y``) of the home cell.

    Returns:
        Array of shape ``(len(disp_dofs), len(components))``.
    """
    rows = [lp.home_position + (lp.n_coarse if c == Y else 0) for c in components]

    def setter(s):
        lp._disp_solver = s

    return _saddle_solve(lambda: lp._disp_solver, setter, lp.disp_saddle,
                         lp.disp_dofs.size, rows, lp.S_disp.shape[0])


@dataclass
class ProjectionOperator:
    """Coarse-to-fine map; row ``k`` of ``R`` is basis ``k`` times ``scale[k]``.

    Coarse DOFs are ordered ``(p_m per cell, p_f per continuum, u_x per cell,
    u_y per cell)``; ``dof_cell`` and ``dof_kind`` (``"m"``, ``"f"``, ``"x"``,
    ``"y"``) describe each one.
    """

    R: sps.csr_matrix
    scale: np.ndarray
    offsets: np.ndarray
    dof_cell: np.ndarray
    dof_kind: np.ndarray
    oversampling: int
    fine_offsets: np.ndarray
    build_time: float = 0.0

    @property
    def shape(self):
        return self.R.shape

    def basis(self, k: int) -> np.ndarray:
        """Raw (integral-normalised) basis ``k`` as a dense fine vector."""
        return self.R[k].toarray().ravel() / self.scale[k]

    def blocks(self):
        """Named sub-blocks ``R_mm, R_mf, R_fm, R_ff, R_xx, R_xy, R_yx, R_yy``."""
        co, fo = self.offsets, self.fine_offsets
        R = self.R
        names = {}
        for a, ra in (("m", 0), ("f", 1), ("x", 2), ("y", 3)):
            for b, cb in (("m", 0), ("f", 1), ("x", 2), ("y", 3)):
                names[f"R_{a}{b}"] = R[co[ra]:co[ra + 1], fo[cb]:fo[cb + 1]]
        return {k: names[k] for k in ("R_mm", "R_mf", "R_fm", "R_ff",
                                      "R_xx", "R_xy", "R_yx", "R_yy")}


def coarse_offsets(cg: CoarseGrid) -> np.ndarray:
    n = cg.num_cells
    return np.cumsum([0, n, cg.num_fracture_dofs, n, n])


def compute_bases(builder: NLMCBuilder, s: int, workers: int = 1):
    """Solve every local problem; returns per-cell ``(flow, disp, lp_meta)`` tuples."""
    cg = builder.cg

    def one(i):
        lp = builder.local_problem(i, s)
        targets = list(range(1 + len(cg.continua[i])))
        flow = solve_pressure_basis(lp, targets)
        disp = solve_displacement_basis(lp, (X, Y))
        return lp.flow_dofs, flow, lp.disp_dofs, disp

    cells = range(cg.num_cells)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(one, cells))
    return [one(i) for i in cells]


def assemble_projection(cg: CoarseGrid, bases, fine_offsets, mesh: FineMesh,
                        s: int = -1, partition_of_unity: bool = True) -> ProjectionOperator:
    """Stack the basis functions into the projection ``R``.

    Args:
        bases: Output of :func:`compute_bases`, one entry per coarse cell.
        fine_offsets: Offsets of ``(p_m, p_f, u_x, u_y)`` in the fine vector.
        partition_of_unity: Correct the pressure bases so that a uniform coarse
            pressure lifts to a uniform fine pressure (see
            :func:`_unity_correction`). Without it the coarse flow operator
            does not conserve mass exactly, which matters whenever storage is
            small compared to the transmissibilities.
    """
    n = cg.num_cells
    if len(bases) != n:
        raise BasisError(f"expected bases for {n} coarse cells, got {len(bases)}")
    co = coarse_offsets(cg)
    fo = np.asarray(fine_offsets)
    nv = mesh.num_vertices
    area = cg.cell_area
    foffs = cg.fracture_offsets()

    rows, cols, vals = [], [], []
    scale = np.zeros(co[-1])
    dof_cell = np.zeros(co[-1], dtype=np.int64)
    dof_kind = np.empty(co[-1], dtype="<U1")
    for i, (flow_dofs, flow, disp_dofs, disp) in enumerate(bases):
        n_l = len(cg.continua[i])
        if flow.shape[1] != 1 + n_l or disp.shape[1] != 2:
            raise BasisError(f"missing basis for coarse cell {i}")
        # flow dofs are already global pressure indices (p_m then p_f)
        flow_cols = flow_dofs
        disp_cols = fo[2] + disp_dofs  # u_x at fo[2] + v, u_y at fo[2] + nv + v = fo[3] + v
        targets = [(co[0] + i, area[i], "m")]
        targets += [(co[1] + foffs[i] + l, cg.continuum_length[i][l], "f") for l in range(n_l)]
        for k, (r, meas, kind) in enumerate(targets):
            rows.append(np.full(flow_cols.size, r))
            cols.append(flow_cols)
            vals.append(meas * flow[:, k])
            scale[r], dof_cell[r], dof_kind[r] = meas, i, kind
        for k, (r, kind) in enumerate(((co[2] + i, "x"), (co[3] + i, "y"))):
            rows.append(np.full(disp_cols.size, r))
            cols.append(disp_cols)
            vals.append(area[i] * disp[:, k])
            scale[r], dof_cell[r], dof_kind[r] = area[i], i, kind
    assert fo[3] - fo[2] == nv
    R = sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(co[-1], fo[-1]))
    if partition_of_unity:
        R = _unity_correction(R, cg, co, fo)
    R.eliminate_zeros()
    return ProjectionOperator(R, scale, co, dof_cell, dof_kind, s, fo)


def _unity_correction(R, cg: CoarseGrid, co, fo):
    """Make the pressure bases sum to one on every fine pressure dof.

    The defect ``1 - sum_k R[k]`` is added, on each continuum of each coarse
    cell, to the basis that belongs to that continuum. Because the summed
    bases already integrate exactly to the measure of every continuum, the
    defect has zero integral there and all constraints stay satisfied.
    """
    n_p = fo[2]
    defect = 1.0 - np.asarray(R[: co[2], :n_p].sum(axis=0)).ravel()
    foffs = cg.fracture_offsets()
    owner = np.empty(n_p, dtype=np.int64)
    owner[: fo[1]] = co[0] + cg.fine_to_coarse
    owner[fo[1]:] = co[1] + foffs[cg.seg_to_coarse] + cg.seg_continuum
    fix = sps.csr_matrix((defect, (owner, np.arange(n_p))), shape=R.shape)
    return (R + fix).tocsr()


def build_projection(builder: NLMCBuilder, s: int, fine_offsets, workers: int = 1,
                     partition_of_unity: bool = True) -> ProjectionOperator:
    t0 = time.perf_counter()
    bases = compute_bases(builder, s, workers)
    P = assemble_projection(builder.cg, bases, fine_offsets, builder.mesh, s, partition_of_unity)
    P.build_time = time.perf_counter() - t0
    logger.info("built %d bases with s=%d in %.2f s", P.R.shape[0], s, P.build_time)
    return P


@dataclass
class CoarseSystem:
    """Upscaled system ``(M_bar / tau + A_bar) y_bar = F_bar(prev)``."""

    A: sps.csr_matrix
    mass: np.ndarray
    source: np.ndarray
    tau: float
    offsets: np.ndarray
    lhs: sps.csr_matrix

    @property
    def size(self) -> int:
        return self.lhs.shape[0]

    @cached_property
    def biot_block(self) -> sps.csr_matrix:
        o = self.offsets
        return self.A[: o[2], o[2]:]

    @cached_property
    def flow_stiffness(self) -> sps.csr_matrix:
        o = self.offsets
        return _drop_block(self.A, o[2])

    def rhs(self, prev: np.ndarray) -> np.ndarray:
        o = self.offsets
        F = self.source + self.mass * prev / self.tau
        # time-lagged Biot term: the pressure/displacement block of A_bar
        F[: o[2]] += self.A[: o[2], o[2]:] @ prev[o[2]:]
        return F

    def initial_state(self, p0: float) -> SimulationState:
        """Uniform coarse pressure ``p0`` with displacements in equilibrium."""
        o = self.offsets
        y = np.zeros(o[-1])
        y[: o[2]] = p0
        K = self.A[o[2]:, o[2]:]
        load = -(self.A[o[2]:, : o[2]] @ y[: o[2]])
        y[o[2]:] = DirectSolver(K).solve(load)
        return SimulationState(y, o, "coarse", 0)


def coarse_mass(cg: CoarseGrid, mp: MaterialParams) -> np.ndarray:
    """Diagonal coarse mass: ``a_m |K_i|`` and ``a_f |gamma_i^l|``; zero on displacements."""
    lengths = np.concatenate([np.asarray(v, dtype=float) for v in cg.continuum_length]) \
        if cg.num_fracture_dofs else np.zeros(0)
    n = cg.num_cells
    return np.concatenate([mp.a_m * cg.cell_area, mp.a_f * lengths, np.zeros(2 * n)])


def upscale(system: AssembledSystem, P: ProjectionOperator, cg: CoarseGrid,
            mp: MaterialParams) -> CoarseSystem:
    """Galerkin coarse operator ``R A R^T``, direct diagonal mass, ``R F`` source."""
    R = P.R
    A_bar = (R @ system.stiffness @ R.T).tocsr()
    mass = coarse_mass(cg, mp)
    source = R @ system.source
    lhs = (A_bar + sps.diags(mass / system.tau)).tocsr()
    return CoarseSystem(A_bar, mass, np.asarray(source).ravel(), system.tau, P.offsets, lhs)


def _vertex_coarse_ranges(mesh: FineMesh, cg: CoarseGrid):
    """Range of coarse column/row indices of the triangles touching each vertex."""
    rx, ry = mesh.nx // cg.Nx, mesh.ny // cg.Ny
    vi = np.arange(mesh.num_vertices)
    i, j = vi % (mesh.nx + 1), vi // (mesh.nx + 1)
    i_lo = np.clip((i - 1) // rx, 0, cg.Nx - 1)
    i_hi = np.clip(i // rx, 0, cg.Nx - 1)
    j_lo = np.clip((j - 1) // ry, 0, cg.Ny - 1)
    j_hi = np.clip(j // ry, 0, cg.Ny - 1)
    return i_lo, i_hi, j_lo, j_hi


def _interval_gap(lo, hi, x):
    return np.where(x < lo, lo - x, np.where(x > hi, x - hi, 0))


def basis_decay(P: ProjectionOperator, cg: CoarseGrid, mesh: FineMesh, layers: int = 3) -> np.ndarray:
    """Per basis: max magnitude beyond ``layers`` coarse layers over the global max.

    A vertex counts as beyond when every triangle touching it lies in a coarse
    cell at Chebyshev distance greater than ``layers`` from the home cell.
    """
    fo = P.fine_offsets
    nv = mesh.num_vertices
    cI = np.arange(cg.num_cells) % cg.Nx
    cJ = np.arange(cg.num_cells) // cg.Nx
    cell_c = cg.fine_to_coarse
    seg_c = cg.seg_to_coarse
    i_lo, i_hi, j_lo, j_hi = _vertex_coarse_ranges(mesh, cg)
    R = P.R.tocsr()
    out = np.zeros(R.shape[0])
    for k in range(R.shape[0]):
        lo, hi = R.indptr[k], R.indptr[k + 1]
        cols, vals = R.indices[lo:hi], np.abs(R.data[lo:hi])
        if vals.size == 0:
            continue
        h = P.dof_cell[k]
        d = np.empty(cols.size, dtype=np.int64)
        m = cols < fo[1]
        c = cell_c[cols[m]]
        d[m] = np.maximum(np.abs(cI[c] - cI[h]), np.abs(cJ[c] - cJ[h]))
        f = (cols >= fo[1]) & (cols < fo[2])
        c = seg_c[cols[f] - fo[1]]
        d[f] = np.maximum(np.abs(cI[c] - cI[h]), np.abs(cJ[c] - cJ[h]))
        u = cols >= fo[2]
        v = (cols[u] - fo[2]) % nv
        d[u] = np.maximum(_interval_gap(i_lo[v], i_hi[v], cI[h]), _interval_gap(j_lo[v], j_hi[v], cJ[h]))
        far = vals[d > layers]
        out[k] = far.max() / vals.max() if far.size else 0.0
    return out
