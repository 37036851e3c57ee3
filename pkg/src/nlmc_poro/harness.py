"""Reference geometries, fine/coarse drivers and the oversampling study."""
from __future__ import annotations

import csv
import io as _io
import logging
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sps

from .assembly import (AssembledSystem, assemble_system, default_source_cells, fine_dof_count,
                       roller_constraints)
from .coefficients import MaterialParams
from .geometry import CoarseGrid, FineMesh, FractureSet, build_coarse_grid, build_fine_mesh, embed_fractures
from .io import atomic_write_text, read_fractures, write_fracture_vtk, write_fractures, write_vtk
from .nlmc import CoarseSystem, NLMCBuilder, ProjectionOperator, build_projection, upscale
from .solver import (CoarseAverager, ErrorMetrics, Trajectory, coarse_state_fields, error_metrics,
                     fine_initial_state, normalized_pressure, run)

logger = logging.getLogger(__name__)

STORED_GEOMETRIES = {"fractures30": "fractures30.txt", "fractures60": "fractures60.txt"}
DEFAULT_LENGTH_RANGE = (0.08, 0.18)
REFERENCE_SEED = 74
TABLE_COLUMNS = ("s", "e_p", "e_ux", "e_uy", "DOF_f", "DOF_c", "wall_time_s")


def generate_fractures(seed: int, count: int, length_range=DEFAULT_LENGTH_RANGE,
                       domain=(1.0, 1.0)) -> list[np.ndarray]:
    """Random straight fractures lying entirely inside the domain.

    Centres and orientations are uniform, lengths uniform in ``length_range``.
    Candidates that leave the domain are redrawn, so the result depends only
    on the arguments.
    """
    if count < 0:
        raise ValueError("fracture count must be non-negative")
    lo, hi = map(float, length_range)
    W, H = map(float, domain)
    if not 0 < lo <= hi or hi >= min(W, H):
        raise ValueError(f"invalid length range {length_range} for domain {domain}")
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        c = rng.uniform((0.0, 0.0), (W, H))
        theta = rng.uniform(0.0, np.pi)
        half = 0.5 * rng.uniform(lo, hi) * np.array([np.cos(theta), np.sin(theta)])
        seg = np.array([c - half, c + half])
        if np.all(seg >= 0.0) and np.all(seg <= (W, H)):
            out.append(seg)
    return out


def write_generated(path, seed: int, count: int, length_range=DEFAULT_LENGTH_RANGE,
                    domain=(1.0, 1.0)) -> list[np.ndarray]:
    fr = generate_fractures(seed, count, length_range, domain)
    header = (f"generated fractures: seed={seed} count={count} "
              f"length_range={tuple(length_range)} domain={tuple(domain)}")
    write_fractures(path, fr, header)
    return fr


def stored_geometry_path(name: str) -> Path:
    """Path of a bundled fracture file (``fractures30`` or ``fractures60``)."""
    if name not in STORED_GEOMETRIES:
        raise KeyError(f"unknown stored geometry {name!r}; choose from {sorted(STORED_GEOMETRIES)}")
    return Path(str(resources.files(__package__) / "data" / STORED_GEOMETRIES[name]))


def load_stored_geometry(name: str) -> list[np.ndarray]:
    return read_fractures(stored_geometry_path(name))


@dataclass
class Problem:
    """Fine mesh, fractures, coarse grid and the assembled fine system."""

    mesh: FineMesh
    fractures: FractureSet
    cg: CoarseGrid
    material: MaterialParams
    system: AssembledSystem
    source_cells: list

    @property
    def dof_f(self) -> int:
        return fine_dof_count(self.mesh, self.fractures)

    @property
    def dof_c(self) -> int:
        return self.cg.dof_count

    def builder(self) -> NLMCBuilder:
        dofs, _ = roller_constraints(self.mesh)
        return NLMCBuilder(self.mesh, self.fractures, self.cg, self.system.operator, dofs)


def build_problem(cfg) -> Problem:
    """Mesh, embed and assemble from a validated :class:`~nlmc_poro.config.RunConfig`."""
    mesh = build_fine_mesh(cfg.nx, cfg.ny)
    path = cfg.fracture_path
    polylines = read_fractures(path) if path is not None else []
    fr = embed_fractures(mesh, polylines)
    cg = build_coarse_grid(mesh, fr, cfg.Nx, cfg.Ny)
    system = assemble_system(mesh, fr, cg, cfg.material, source_cells=cfg.source_cells)
    cells = list(cfg.source_cells) if cfg.source_cells is not None else default_source_cells(cg)
    return Problem(mesh, fr, cg, cfg.material, system, cells)


@dataclass
class FineRun:
    trajectory: Trajectory
    averages: list
    wall_time: float


@dataclass
class CoarseRun:
    """``wall_time`` covers the initial state and time stepping, like
    :attr:`FineRun.wall_time`; building the coarse operator is ``upscale_time``."""

    projection: ProjectionOperator
    system: CoarseSystem
    trajectory: Trajectory
    wall_time: float
    upscale_time: float = 0.0


def run_fine(problem: Problem, snapshots=(5, 15, 50)) -> FineRun:
    """Fine reference run; coarse averages of every step are recorded.

    The wall time covers the initial state and time stepping (including the
    factorisation), not the assembly.
    """
    avg = CoarseAverager(problem.mesh, problem.fractures, problem.cg)
    t0 = time.perf_counter()
    init = fine_initial_state(problem.system, problem.material.p0)
    averages = [avg(init)]
    traj = run(problem.system, init, problem.material.n_steps, snapshots, keep_all=False,
               callback=lambda st: averages.append(avg(st)))
    return FineRun(traj, averages, time.perf_counter() - t0)


def run_coarse(problem: Problem, projection: ProjectionOperator, snapshots=(5, 15, 50)) -> CoarseRun:
    """Upscale with ``projection`` and march the coarse model.

    The operator ``R A R^T`` is timed separately from the solve, mirroring the
    fine run, whose wall time excludes assembly.
    """
    t0 = time.perf_counter()
    csys = upscale(problem.system, projection, problem.cg, problem.material)
    t1 = time.perf_counter()
    init = csys.initial_state(problem.material.p0)
    traj = run(csys, init, problem.material.n_steps, snapshots, keep_all=True)
    return CoarseRun(projection, csys, traj, time.perf_counter() - t1, t1 - t0)


def build_basis(problem: Problem, s: int, workers: int = 1) -> ProjectionOperator:
    return build_projection(problem.builder(), s, problem.system.offsets, workers=workers)


@dataclass
class ComparisonRow:
    s: int
    errors: ErrorMetrics
    dof_f: int
    dof_c: int
    wall_time: float
    step_errors: list = field(default_factory=list)

    def table_row(self):
        return (self.s, *self.errors.as_tuple(), self.dof_f, self.dof_c, self.wall_time)


def compare(problem: Problem, s_list, workers: int = 1, fine: FineRun | None = None,
            on_row=None) -> tuple[FineRun, list]:
    """One fine reference, then a basis build and coarse run per ``s``.

    The wall time of a row covers the coarse solve only; basis construction
    and upscaling are logged separately.
    """
    fine = run_fine(problem) if fine is None else fine
    rows = []
    for s in s_list:
        P = build_basis(problem, int(s), workers)
        cr = run_coarse(problem, P)
        step_err = [error_metrics(fa, coarse_state_fields(st))
                    for fa, st in zip(fine.averages, cr.trajectory.states)]
        row = ComparisonRow(int(s), step_err[-1], problem.dof_f, problem.dof_c, cr.wall_time, step_err)
        logger.info("s=%d  e_p=%.4g%%  e_ux=%.4g%%  e_uy=%.4g%%  basis %.1f s  upscale %.2f s  "
                    "coarse %.2f s", s, *row.errors.as_tuple(), P.build_time, cr.upscale_time,
                    cr.wall_time)
        rows.append(row)
        if on_row is not None:
            on_row(row, cr)
    return fine, rows


def format_table(rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for r in rows:
        s, ep, ex, ey, df, dc, wt = r.table_row()
        w.writerow([s, f"{ep:.10g}", f"{ex:.10g}", f"{ey:.10g}", df, dc, f"{wt:.4f}"])
    return buf.getvalue()


def format_step_errors(rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("s", "step", "e_p", "e_ux", "e_uy"))
    for r in rows:
        for n, e in enumerate(r.step_errors):
            w.writerow([r.s, n, *(f"{v:.10g}" for v in e.as_tuple())])
    return buf.getvalue()


def write_snapshots(directory, problem: Problem, states, prefix: str) -> list:
    """VTK files of normalised pressure and displacement at each state."""
    directory = Path(directory)
    p0 = problem.material.p0
    out = []
    for st in states:
        base = directory / f"{prefix}_step{st.step:03d}"
        write_vtk(f"{base}.vtk", problem.mesh,
                  cell_data={"p_star": normalized_pressure(st.p_m, p0)},
                  point_data={"u": (st.u_x, st.u_y)},
                  title=f"{prefix} step {st.step}")
        write_fracture_vtk(f"{base}_fractures.vtk", problem.fractures.segments,
                           cell_data={"p_star": normalized_pressure(st.p_f, p0)})
        out.append(base)
    return out


def write_basis_vtk(directory, problem: Problem, P: ProjectionOperator, dofs) -> list:
    """One VTK file per coarse DOF in ``dofs`` with its raw basis function."""
    directory = Path(directory)
    fo = P.fine_offsets
    out = []
    for k in dofs:
        if not 0 <= k < P.R.shape[0]:
            raise IndexError(f"coarse dof {k} out of range")
        v = P.basis(int(k))
        name = directory / f"basis_s{P.oversampling}_{P.dof_kind[k]}{int(k)}.vtk"
        write_vtk(name, problem.mesh, cell_data={"psi_m": v[: fo[1]]},
                  point_data={"psi_u": (v[fo[2]:fo[3]], v[fo[3]:fo[4]])},
                  title=f"basis {k} ({P.dof_kind[k]}) of coarse cell {P.dof_cell[k]}")
        write_fracture_vtk(name.with_name(name.stem + "_fractures.vtk"), problem.fractures.segments,
                           cell_data={"psi_f": v[fo[1]:fo[2]]})
        out.append(name)
    return out


def save_projection(path, P: ProjectionOperator) -> None:
    R = P.R.tocsr()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, data=R.data, indices=R.indices, indptr=R.indptr, shape=np.array(R.shape),
             scale=P.scale, offsets=P.offsets, dof_cell=P.dof_cell,
             dof_kind=P.dof_kind.astype("U1"), oversampling=P.oversampling,
             fine_offsets=P.fine_offsets, build_time=P.build_time)


def load_projection(path) -> ProjectionOperator:
    with np.load(path) as z:
        R = sps.csr_matrix((z["data"], z["indices"], z["indptr"]), shape=tuple(z["shape"]))
        return ProjectionOperator(R, z["scale"], z["offsets"], z["dof_cell"], z["dof_kind"],
                                  int(z["oversampling"]), z["fine_offsets"], float(z["build_time"]))


def summary_text(items: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def write_text(path, text: str) -> None:
    atomic_write_text(path, text)
