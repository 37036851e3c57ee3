"""Run configuration: INI-style files, validation and defaults.

Example::

    [mesh]
    nx = 120
    ny = 120
    Nx = 20
    Ny = 20

    [nlmc]
    s = 1, 2, 3, 4

    [fractures]
    file = stored:fractures30

    [output]
    directory = out
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .coefficients import MaterialParams

MODES = ("fine", "basis", "coarse", "compare")
BOUNDARY_KINDS = ("roller",)
STORED_PREFIX = "stored:"


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 2)."""


@dataclass
class RunConfig:
    nx: int = 120
    ny: int = 120
    Nx: int = 20
    Ny: int = 20
    s_list: tuple = (1, 2, 3, 4)
    material: MaterialParams = field(default_factory=MaterialParams)
    fracture_file: str = STORED_PREFIX + "fractures30"
    source_cells: tuple | None = None
    boundary: str = "roller"
    output_dir: str = "nlmc_output"
    mode: str = "compare"
    seed: int = 74
    snapshots: tuple = (5, 15, 50)
    workers: int = 1
    dump_blocks: bool = False

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    @property
    def fracture_path(self) -> Path | None:
        """Resolved fracture file, ``None`` for an unfractured domain."""
        if self.fracture_file in ("", "none"):
            return None
        if self.fracture_file.startswith(STORED_PREFIX):
            from .harness import stored_geometry_path
            try:
                return stored_geometry_path(self.fracture_file[len(STORED_PREFIX):])
            except KeyError as exc:
                raise ConfigError(str(exc.args[0])) from None
        return Path(self.fracture_file)

    def validate(self) -> "RunConfig":
        """Check divisibility, ranges and file existence; return ``self``."""
        for name in ("nx", "ny", "Nx", "Ny"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.nx % self.Nx or self.ny % self.Ny:
            raise ConfigError(
                f"fine grid {self.nx}x{self.ny} is not divisible by coarse grid {self.Nx}x{self.Ny}")
        if not self.s_list or any(int(s) < 0 for s in self.s_list):
            raise ConfigError("oversampling layers must be non-negative integers")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.boundary not in BOUNDARY_KINDS:
            raise ConfigError(f"unsupported boundary condition {self.boundary!r}")
        if self.source_cells is not None:
            for c in self.source_cells:
                if not 0 <= int(c) < self.Nx * self.Ny:
                    raise ConfigError(f"source coarse cell {c} outside the {self.Nx}x{self.Ny} grid")
        if any(int(k) < 0 for k in self.snapshots):
            raise ConfigError("snapshot indices must be non-negative")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        path = self.fracture_path
        if path is not None and not path.is_file():
            raise ConfigError(f"fracture file not found: {path}")
        return self


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"expected a list of integers, got {text!r}") from None


_MATERIAL_KEYS = {f.name: f.type for f in fields(MaterialParams)}


def load_config(path, **overrides) -> RunConfig:
    """Read an INI file; ``overrides`` with value ``None`` are ignored."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_parser(cp, **overrides)


def config_from_parser(cp: configparser.ConfigParser, **overrides) -> RunConfig:
    known = {"mesh", "nlmc", "material", "fractures", "sources", "boundary", "output", "run"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kw = {}
    try:
        if cp.has_section("mesh"):
            for k, v in cp.items("mesh"):
                if k not in ("nx", "ny", "Nx", "Ny"):
                    raise ConfigError(f"unknown key {k!r} in [mesh]")
                kw[k] = int(v)
        if cp.has_section("nlmc"):
            for k, v in cp.items("nlmc"):
                if k == "s":
                    kw["s_list"] = _int_list(v)
                elif k == "workers":
                    kw["workers"] = int(v)
                else:
                    raise ConfigError(f"unknown key {k!r} in [nlmc]")
        mat = {}
        if cp.has_section("material"):
            for k, v in cp.items("material"):
                if k not in _MATERIAL_KEYS:
                    raise ConfigError(f"unknown key {k!r} in [material]")
                mat[k] = int(v) if k == "n_steps" else float(v)
        if cp.has_section("sources"):
            for k, v in cp.items("sources"):
                if k == "cells":
                    kw["source_cells"] = _int_list(v)
                elif k == "q":
                    mat["q"] = float(v)
                else:
                    raise ConfigError(f"unknown key {k!r} in [sources]")
        if cp.has_section("fractures"):
            for k, v in cp.items("fractures"):
                if k == "file":
                    kw["fracture_file"] = v.strip()
                elif k == "seed":
                    kw["seed"] = int(v)
                else:
                    raise ConfigError(f"unknown key {k!r} in [fractures]")
        if cp.has_section("boundary"):
            for k, v in cp.items("boundary"):
                if k != "type":
                    raise ConfigError(f"unknown key {k!r} in [boundary]")
                kw["boundary"] = v.strip()
        if cp.has_section("output"):
            for k, v in cp.items("output"):
                if k == "directory":
                    kw["output_dir"] = v.strip()
                elif k == "snapshots":
                    kw["snapshots"] = _int_list(v)
                elif k == "dump_blocks":
                    kw["dump_blocks"] = cp.getboolean("output", k)
                else:
                    raise ConfigError(f"unknown key {k!r} in [output]")
        if cp.has_section("run"):
            for k, v in cp.items("run"):
                if k != "mode":
                    raise ConfigError(f"unknown key {k!r} in [run]")
                kw["mode"] = v.strip()
        kw["material"] = MaterialParams(**mat)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**kw)


def format_config(cfg: RunConfig) -> str:
    """Render ``cfg`` in the file format read by :func:`load_config`."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["mesh"] = {k: str(getattr(cfg, k)) for k in ("nx", "ny", "Nx", "Ny")}
    cp["nlmc"] = {"s": ", ".join(map(str, cfg.s_list)), "workers": str(cfg.workers)}
    cp["material"] = {f.name: repr(getattr(cfg.material, f.name))
                      for f in fields(MaterialParams) if f.name != "q"}
    cp["sources"] = {"q": repr(cfg.material.q)}
    if cfg.source_cells is not None:
        cp["sources"]["cells"] = ", ".join(map(str, cfg.source_cells))
    cp["fractures"] = {"file": cfg.fracture_file, "seed": str(cfg.seed)}
    cp["boundary"] = {"type": cfg.boundary}
    cp["output"] = {"directory": cfg.output_dir, "snapshots": ", ".join(map(str, cfg.snapshots)),
                    "dump_blocks": str(cfg.dump_blocks).lower()}
    cp["run"] = {"mode": cfg.mode}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
