"""Implicit time stepping, reconstruction, coarse averaging and error metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .geometry import CoarseGrid, FineMesh, FractureSet, coarse_vertex_weights

logger = logging.getLogger(__name__)

DEFAULT_SNAPSHOTS = (5, 15, 50)


class SolverError(RuntimeError):
    pass


class DirectSolver:
    """Sparse LU of an equilibrated copy of ``matrix``, reusable across solves.

    Rows, then columns, are scaled by their largest magnitude before
    factorising. Coefficients of the coupled system span roughly thirty
    orders of magnitude, which threshold pivoting does not cope with unscaled.
    """

    def __init__(self, matrix, permc_spec: str = "COLAMD"):
        A = sps.csc_matrix(matrix)
        if A.shape[0] != A.shape[1]:
            raise SolverError("matrix is not square")
        r = abs(A).max(axis=1).toarray().ravel()
        if np.any(r == 0):
            raise SolverError("matrix has an empty row")
        self.row_scale = 1.0 / r
        c = abs(sps.diags(self.row_scale) @ A).max(axis=0).toarray().ravel()
        if np.any(c == 0):
            raise SolverError("matrix has an empty column")
        self.col_scale = 1.0 / c
        scaled = (sps.diags(self.row_scale) @ A @ sps.diags(self.col_scale)).tocsc()
        try:
            self._lu = spla.splu(scaled, permc_spec=permc_spec)
        except RuntimeError as exc:
            raise SolverError(f"factorisation failed: {exc}") from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 1:
            z = self._lu.solve(rhs * self.row_scale)
            y = z * self.col_scale
        else:
            z = self._lu.solve(rhs * self.row_scale[:, None])
            y = z * self.col_scale[:, None]
        if not np.all(np.isfinite(y)):
            raise SolverError("non-finite solution (singular system?)")
        return y


@dataclass
class SimulationState:
    """Solution vector with named views; ``kind`` is ``"fine"`` or ``"coarse"``."""

    vector: np.ndarray
    offsets: np.ndarray
    kind: str = "fine"
    step: int = 0

    def _part(self, k):
        return self.vector[self.offsets[k]:self.offsets[k + 1]]

    @property
    def p_m(self):
        return self._part(0)

    @property
    def p_f(self):
        return self._part(1)

    @property
    def u_x(self):
        return self._part(2)

    @property
    def u_y(self):
        return self._part(3)

    def copy(self, **kw) -> "SimulationState":
        out = SimulationState(self.vector.copy(), self.offsets, self.kind, self.step)
        for k, v in kw.items():
            setattr(out, k, v)
        return out


def _solver_for(sys) -> DirectSolver:
    cached = getattr(sys, "_direct_solver", None)
    if cached is None:
        cached = DirectSolver(sys.lhs)
        sys._direct_solver = cached
    return cached


def shifted_product(A, v: np.ndarray, n_p: int, coupling_rowsum=None) -> np.ndarray:
    """``A @ v`` with the uniform pressure level removed before multiplying.

    The flow rows of the operators annihilate a uniform pressure exactly, so
    only the displacement rows see the shift. Pressures carry a large common
    level, and multiplying it through the transmissibilities would swamp the
    much smaller storage terms in round-off.

    Args:
        coupling_rowsum: Precomputed row sums of ``A[n_p:, :n_p]``.
    """
    c = v[:n_p].mean() if n_p else 0.0
    z = v.copy()
    z[:n_p] -= c
    out = A @ z
    if c != 0.0 and n_p < v.size:
        if coupling_rowsum is None:
            coupling_rowsum = np.asarray(A[n_p:, :n_p].sum(axis=1)).ravel()
        out[n_p:] += c * coupling_rowsum
    return out


def _extended_operators(sys):
    """Long-double copies of the residual operators, cached on ``sys``."""
    cached = getattr(sys, "_extended", None)
    if cached is None:
        n_p = sys.offsets[2]
        flow = sys.flow_stiffness.astype(np.longdouble)
        rowsum = np.asarray(flow[n_p:, :n_p].sum(axis=1)).ravel()
        cached = (flow, rowsum, sys.biot_block.astype(np.longdouble),
                  np.asarray(sys.mass, dtype=np.longdouble))
        sys._extended = cached
    return cached


def step_residual(sys, y: np.ndarray, prev: np.ndarray) -> np.ndarray:
    """``F(prev) - (M / tau + A) y`` evaluated without cancellation.

    The pressure-row Biot terms of ``F`` and ``A y`` are combined through the
    displacement increment ``y - prev``. Products are accumulated in long
    double: the uniform pressure mode is fixed only by the small storage
    terms, which double-precision rounding in the stiff fracture rows would
    otherwise perturb.
    """
    o = sys.offsets
    n_p = o[2]
    flow, rowsum, biot, mass = _extended_operators(sys)
    y = np.asarray(y, dtype=np.longdouble)
    d = y - np.asarray(prev, dtype=np.longdouble)
    r = np.asarray(sys.source, dtype=np.longdouble) - mass * d / sys.tau
    r -= shifted_product(flow, y, n_p, rowsum)
    r[:n_p] -= biot @ d[n_p:]
    dofs = getattr(sys, "dirichlet_dofs", None)
    if dofs is not None and len(dofs):
        r[dofs] = sys.dirichlet_values - y[dofs]
    return r.astype(float)


def implicit_step(sys, prev: SimulationState, reuse: bool = True,
                  refinements: int = 2) -> SimulationState:
    """One backward-Euler step of ``(M / tau + A) y = F(prev)``.

    ``sys`` is an :class:`~nlmc_poro.assembly.AssembledSystem` or a
    :class:`~nlmc_poro.nlmc.CoarseSystem`. The step is solved for the
    increment ``y - prev`` followed by ``refinements`` rounds of iterative
    refinement, all with the same factorisation.
    """
    if prev.vector.size != sys.lhs.shape[0]:
        raise SolverError(
            f"state of size {prev.vector.size} does not match system of size {sys.lhs.shape[0]}")
    solver = _solver_for(sys) if reuse else DirectSolver(sys.lhs)
    y = prev.vector.copy()
    for _ in range(1 + refinements):
        y = y + solver.solve(step_residual(sys, y, prev.vector))
    return SimulationState(y, prev.offsets, prev.kind, prev.step + 1)


@dataclass
class Trajectory:
    states: list
    snapshots: dict = field(default_factory=dict)

    @property
    def final(self) -> SimulationState:
        return self.states[-1]


def run(sys, initial: SimulationState, n_steps: int, snapshots=DEFAULT_SNAPSHOTS,
        keep_all: bool = True, callback=None) -> Trajectory:
    """March ``n_steps`` implicit steps from ``initial``.

    Args:
        snapshots: Step indices whose states are kept in ``Trajectory.snapshots``.
        keep_all: Keep every state in ``Trajectory.states``; otherwise only the
            initial and the last.
        callback: Called with every new state.
    """
    if n_steps < 1:
        raise SolverError("n_steps must be at least 1")
    states = [initial]
    snaps = {}
    state = initial
    for _ in range(n_steps):
        state = implicit_step(sys, state)
        if callback is not None:
            callback(state)
        if state.step in snapshots:
            snaps[state.step] = state
        if keep_all:
            states.append(state)
    if not keep_all:
        states.append(state)
    return Trajectory(states, snaps)


def fine_initial_state(system, p0: float) -> SimulationState:
    """Uniform pressure ``p0`` with displacements in mechanical equilibrium."""
    o = system.offsets
    y = np.zeros(o[-1])
    y[: o[2]] = p0
    f = system.steady_mechanics_rhs(y) - system.lift
    u = solve_mechanics(system.lhs, f, o[2], system.dirichlet_dofs, system.dirichlet_values)
    y[o[2]:] = u
    return SimulationState(y, o, "fine", 0)


def solve_mechanics(lhs, rhs, start, dirichlet_dofs=None, dirichlet_values=None) -> np.ndarray:
    """Solve the displacement block of ``lhs`` for the load ``rhs[start:]``."""
    K = sps.csr_matrix(lhs)[start:, start:]
    f = rhs[start:].copy()
    if dirichlet_dofs is not None and len(dirichlet_dofs):
        f[np.asarray(dirichlet_dofs) - start] = dirichlet_values
    return DirectSolver(K).solve(f)


def reconstruct(projection, coarse: SimulationState, fine_offsets) -> SimulationState:
    """Lift a coarse state to the fine grid with ``R^T``."""
    y = projection.R.T @ coarse.vector
    return SimulationState(np.asarray(y).ravel(), fine_offsets, "fine", coarse.step)


@dataclass
class CoarseAverages:
    p_m: np.ndarray
    p_f: np.ndarray
    u_x: np.ndarray
    u_y: np.ndarray


class CoarseAverager:
    """Area-weighted coarse-cell averages of fine fields.

    Finite-volume fields are weighted by triangle areas, P1 fields are
    integrated exactly through the hat-function integrals per coarse cell.
    Fracture pressures are averaged per local continuum by segment length.
    """

    def __init__(self, mesh: FineMesh, fr: FractureSet, cg: CoarseGrid):
        n = cg.num_cells
        area = np.bincount(cg.fine_to_coarse, weights=mesh.areas, minlength=n)
        self.cell_avg = sps.csr_matrix(
            (mesh.areas / area[cg.fine_to_coarse], (cg.fine_to_coarse, np.arange(mesh.num_cells))),
            shape=(n, mesh.num_cells))
        W = coarse_vertex_weights(mesh, cg)
        self.vertex_avg = (sps.diags(1.0 / area) @ W).tocsr()
        offs = cg.fracture_offsets()
        ns = fr.num_segments
        if ns:
            rows = offs[cg.seg_to_coarse] + cg.seg_continuum
            lens = np.bincount(rows, weights=fr.seg_length, minlength=offs[-1])
            self.frac_avg = sps.csr_matrix((fr.seg_length / lens[rows], (rows, np.arange(ns))),
                                           shape=(offs[-1], ns))
        else:
            self.frac_avg = sps.csr_matrix((offs[-1], 0))

    def __call__(self, state: SimulationState) -> CoarseAverages:
        return CoarseAverages(self.cell_avg @ state.p_m, self.frac_avg @ state.p_f,
                              self.vertex_avg @ state.u_x, self.vertex_avg @ state.u_y)


def coarse_average(state: SimulationState, mesh: FineMesh, fr: FractureSet,
                   cg: CoarseGrid) -> CoarseAverages:
    return CoarseAverager(mesh, fr, cg)(state)


def coarse_state_fields(state: SimulationState) -> CoarseAverages:
    """Coarse DOFs are averages already; view them in the same container."""
    return CoarseAverages(state.p_m, state.p_f, state.u_x, state.u_y)


@dataclass
class ErrorMetrics:
    """Relative errors in percent; a field flagged absolute had a zero reference."""

    e_p: float
    e_ux: float
    e_uy: float
    absolute: tuple = (False, False, False)

    def as_tuple(self):
        return self.e_p, self.e_ux, self.e_uy


def relative_l2(reference, approx):
    """``sqrt(sum (ref - approx)^2 / sum ref^2)`` in percent, or RSS if ``ref == 0``."""
    reference = np.asarray(reference, dtype=float)
    approx = np.asarray(approx, dtype=float)
    if reference.shape != approx.shape:
        raise ValueError("coarse layouts do not match")
    num = np.sum((reference - approx) ** 2)
    den = np.sum(reference ** 2)
    if den == 0.0:
        return float(np.sqrt(num)), True
    return float(100.0 * np.sqrt(num / den)), False


def error_metrics(fine_avg: CoarseAverages, coarse: CoarseAverages) -> ErrorMetrics:
    parts = [relative_l2(fine_avg.p_m, coarse.p_m),
             relative_l2(fine_avg.u_x, coarse.u_x),
             relative_l2(fine_avg.u_y, coarse.u_y)]
    return ErrorMetrics(*(p[0] for p in parts), absolute=tuple(p[1] for p in parts))


def normalized_pressure(p, p0):
    return (np.asarray(p) - p0) / p0
