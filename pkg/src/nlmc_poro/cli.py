"""Command line interface: ``nlmc-poro {fine,basis,coarse,compare,genfrac}``.

Exit codes: 0 success, 2 configuration or input error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .assembly import AssemblyError
from .config import ConfigError, RunConfig, format_config, load_config
from .geometry import GeometryError
from .io import FractureFileError
from .nlmc import BasisError
from .solver import SolverError, reconstruct

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3

logger = logging.getLogger("nlmc_poro")


def _int_list(text):
    try:
        return tuple(int(t) for t in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None


def _add_run_args(p: argparse.ArgumentParser, with_s: bool = True) -> None:
    p.add_argument("-v", "--verbose", action="count", default=0, help="log progress (-vv for debug)")
    p.add_argument("--config", help="INI run configuration; flags override its values")
    p.add_argument("--nx", type=int, help="fine squares in x (default 120)")
    p.add_argument("--ny", type=int, help="fine squares in y (default 120)")
    p.add_argument("--Nx", type=int, help="coarse cells in x (default 20)")
    p.add_argument("--Ny", type=int, help="coarse cells in y (default 20)")
    if with_s:
        p.add_argument("-s", "--oversampling", type=_int_list, dest="s_list",
                       help="oversampling layers, e.g. '1,2,3,4'")
        p.add_argument("--workers", type=int, help="threads for basis construction")
    p.add_argument("--fractures", dest="fracture_file",
                   help="fracture file, 'stored:fractures30', 'stored:fractures60' or 'none'")
    p.add_argument("--sources", type=_int_list, dest="source_cells",
                   help="coarse cell ids carrying the point sources")
    p.add_argument("--q", type=float, help="source rate per source cell")
    p.add_argument("--output", "-o", dest="output_dir", help="output directory")
    p.add_argument("--dump-blocks", action="store_true", default=None,
                   help="write fine blocks in Matrix Market format")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nlmc-poro",
        description="Fine-grid and upscaled simulation of flow and deformation in fractured "
                    "poroelastic media.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fine", help="run the fine-grid reference simulation")
    _add_run_args(p, with_s=False)
    p = sub.add_parser("basis", help="build multiscale bases and save the projection")
    _add_run_args(p)
    p.add_argument("--export-basis", type=_int_list, default=(),
                   help="coarse dof ids whose basis functions are written as VTK")
    p = sub.add_parser("coarse", help="run the upscaled model")
    _add_run_args(p)
    p.add_argument("--basis", help="projection saved by the 'basis' command")
    p = sub.add_parser("compare", help="oversampling study against the fine reference")
    _add_run_args(p)

    p = sub.add_parser("genfrac", help="write a random fracture file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--length-min", type=float, default=0.08)
    p.add_argument("--length-max", type=float, default=0.18)
    p.add_argument("--width", type=float, default=1.0)
    p.add_argument("--height", type=float, default=1.0)
    p.add_argument("--output", "-o", required=True, help="fracture file to write")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def config_from_args(args) -> RunConfig:
    keys = ("nx", "ny", "Nx", "Ny", "s_list", "workers", "fracture_file", "source_cells",
            "output_dir", "dump_blocks")
    over = {k: getattr(args, k, None) for k in keys}
    over["mode"] = args.command
    cfg = load_config(args.config, **over) if args.config else RunConfig(
        **{k: v for k, v in over.items() if v is not None})
    if args.q is not None:
        cfg = cfg.with_(material=cfg.material.with_(q=args.q))
    return cfg.validate()


def cmd_genfrac(args) -> int:
    from .harness import write_generated
    if args.count < 0:
        raise ConfigError("count must be non-negative")
    try:
        write_generated(args.output, args.seed, args.count, (args.length_min, args.length_max),
                        (args.width, args.height))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(f"wrote {args.count} fractures to {args.output}")
    return EXIT_OK


def _prepare(cfg, problem=None):
    from .harness import build_problem, summary_text, write_text
    problem = problem or build_problem(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "config.ini", format_config(cfg))
    if cfg.dump_blocks:
        problem.system.operator.dump(out / "blocks")
    return problem, out, summary_text, write_text


def cmd_fine(cfg) -> int:
    from .harness import run_fine, write_snapshots
    problem, out, summary_text, write_text = _prepare(cfg)
    fr = run_fine(problem, cfg.snapshots)
    states = [fr.trajectory.snapshots[k] for k in sorted(fr.trajectory.snapshots)]
    write_snapshots(out, problem, states, "fine")
    info = {"DOF_f": problem.dof_f, "N_cells": problem.mesh.num_cells,
            "N_segments": problem.fractures.num_segments, "N_vertices": problem.mesh.num_vertices,
            "steps": problem.material.n_steps, "wall_time_s": f"{fr.wall_time:.4f}"}
    write_text(out / "fine_summary.txt", summary_text(info))
    print(summary_text(info), end="")
    return EXIT_OK


def cmd_basis(cfg, export=()) -> int:
    from .harness import build_basis, save_projection, write_basis_vtk
    if any(not 0 <= k for k in export):
        raise ConfigError("basis ids must be non-negative")
    problem, out, summary_text, write_text = _prepare(cfg)
    if any(k >= problem.dof_c for k in export):
        raise ConfigError(f"basis ids must be below DOF_c = {problem.dof_c}")
    for s in cfg.s_list:
        P = build_basis(problem, s, cfg.workers)
        save_projection(out / f"basis_s{s}.npz", P)
        write_basis_vtk(out, problem, P, export)
        info = {"s": s, "DOF_c": problem.dof_c, "basis_time_s": f"{P.build_time:.4f}"}
        write_text(out / f"basis_s{s}_summary.txt", summary_text(info))
        print(summary_text(info), end="")
    return EXIT_OK


def cmd_coarse(cfg, basis_path=None) -> int:
    from .harness import build_basis, build_problem, load_projection, run_coarse, write_snapshots
    if basis_path is not None and not Path(basis_path).is_file():
        raise ConfigError(f"basis file not found: {basis_path}")
    if basis_path is not None and len(cfg.s_list) != 1:
        raise ConfigError("--basis takes a single projection; give one -s value")
    problem = build_problem(cfg)
    loaded = load_projection(basis_path) if basis_path else None
    if loaded is not None and loaded.R.shape != (problem.dof_c, problem.dof_f):
        raise ConfigError(f"projection shape {loaded.R.shape} does not match this problem")
    problem, out, summary_text, write_text = _prepare(cfg, problem)
    for s in cfg.s_list:
        P = loaded if loaded is not None else build_basis(problem, s, cfg.workers)
        cr = run_coarse(problem, P, cfg.snapshots)
        snaps = [cr.trajectory.snapshots[k] for k in sorted(cr.trajectory.snapshots)]
        fine = [reconstruct(P, st, problem.system.offsets) for st in snaps]
        write_snapshots(out, problem, fine, f"coarse_s{s}")
        info = {"s": P.oversampling, "DOF_f": problem.dof_f, "DOF_c": problem.dof_c,
                "basis_time_s": f"{P.build_time:.4f}", "upscale_time_s": f"{cr.upscale_time:.4f}",
                "wall_time_s": f"{cr.wall_time:.4f}"}
        write_text(out / f"coarse_s{s}_summary.txt", summary_text(info))
        print(summary_text(info), end="")
    return EXIT_OK


def cmd_compare(cfg) -> int:
    from .harness import compare, format_step_errors, format_table
    problem, out, summary_text, write_text = _prepare(cfg)
    fine, rows = compare(problem, cfg.s_list, cfg.workers)
    table = format_table(rows)
    write_text(out / "errors.csv", table)
    write_text(out / "errors_by_step.csv", format_step_errors(rows))
    write_text(out / "fine_summary.txt",
               summary_text({"DOF_f": problem.dof_f, "wall_time_s": f"{fine.wall_time:.4f}"}))
    print(table, end="")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "genfrac":
            return cmd_genfrac(args)
        cfg = config_from_args(args)
        if args.command == "fine":
            return cmd_fine(cfg)
        if args.command == "basis":
            return cmd_basis(cfg, args.export_basis)
        if args.command == "coarse":
            return cmd_coarse(cfg, args.basis)
        return cmd_compare(cfg)
    except (ConfigError, FractureFileError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, BasisError, AssemblyError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
