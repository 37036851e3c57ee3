"""Plain-text fracture files, legacy VTK output and Matrix Market dumps.

A fracture file holds one polyline per line as whitespace-separated vertex
coordinates ``x1 y1 x2 y2 [x3 y3 ...]``. Blank lines and text after ``#``
are ignored.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sps

from .geometry import FineMesh


class FractureFileError(ValueError):
    pass


def read_fractures(path) -> list[np.ndarray]:
    """Read polylines as a list of ``(k, 2)`` vertex arrays."""
    path = Path(path)
    if not path.is_file():
        raise FractureFileError(f"fracture file not found: {path}")
    polylines = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            vals = np.array([float(t) for t in line.split()])
        except ValueError as exc:
            raise FractureFileError(f"{path}:{lineno}: {exc}") from None
        if vals.size < 4 or vals.size % 2:
            raise FractureFileError(
                f"{path}:{lineno}: expected an even number (>= 4) of coordinates, got {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise FractureFileError(f"{path}:{lineno}: non-finite coordinate")
        polylines.append(vals.reshape(-1, 2))
    return polylines


def format_fractures(polylines, header: str = "") -> str:
    lines = [f"# {h}" if h else "#" for h in header.splitlines()]
    for poly in polylines:
        lines.append(" ".join(f"{v:.17g}" for v in np.asarray(poly, dtype=float).ravel()))
    return "\n".join(lines) + "\n"


def write_fractures(path, polylines, header: str = "") -> None:
    atomic_write_text(path, format_fractures(polylines, header))


def atomic_write_text(path, text: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_vtk(path, mesh: FineMesh, cell_data=None, point_data=None,
              title: str = "nlmc_poro") -> None:
    """Legacy ASCII VTK unstructured grid of the triangle mesh.

    Args:
        cell_data: Name to per-triangle array.
        point_data: Name to per-vertex array. A name mapping to a tuple of
            two arrays is written as a 3-vector with zero third component.
    """
    pts = mesh.vertices
    out = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII",
           "DATASET UNSTRUCTURED_GRID", f"POINTS {len(pts)} double"]
    out += [f"{x:.17g} {y:.17g} 0" for x, y in pts]
    nc = mesh.num_cells
    out.append(f"CELLS {nc} {4 * nc}")
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.cells]
    out.append(f"CELL_TYPES {nc}")
    out += ["5"] * nc
    if cell_data:
        out.append(f"CELL_DATA {nc}")
        out += _vtk_fields(cell_data, nc)
    if point_data:
        out.append(f"POINT_DATA {len(pts)}")
        out += _vtk_fields(point_data, len(pts))
    atomic_write_text(path, "\n".join(out) + "\n")


def write_fracture_vtk(path, segments, cell_data=None, title: str = "fractures") -> None:
    """Legacy ASCII VTK of fracture segments as line cells."""
    seg = np.asarray(segments, dtype=float).reshape(-1, 2, 2)
    n = len(seg)
    out = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII",
           "DATASET UNSTRUCTURED_GRID", f"POINTS {2 * n} double"]
    out += [f"{x:.17g} {y:.17g} 0" for x, y in seg.reshape(-1, 2)]
    out.append(f"CELLS {n} {3 * n}")
    out += [f"2 {2 * k} {2 * k + 1}" for k in range(n)]
    out.append(f"CELL_TYPES {n}")
    out += ["3"] * n
    if cell_data and n:
        out.append(f"CELL_DATA {n}")
        out += _vtk_fields(cell_data, n)
    atomic_write_text(path, "\n".join(out) + "\n")


def _vtk_fields(data, n):
    out = []
    for name, values in data.items():
        key = str(name).replace(" ", "_")
        if isinstance(values, tuple) and len(values) == 2 and np.ndim(values[0]) == 1:
            vx, vy = (np.asarray(v, dtype=float) for v in values)
            if vx.shape != (n,) or vy.shape != (n,):
                raise ValueError(f"field {name!r} has the wrong length")
            out.append(f"VECTORS {key} double")
            out += [f"{a:.17g} {b:.17g} 0" for a, b in zip(vx, vy)]
        else:
            v = np.asarray(values, dtype=float)
            if v.shape != (n,):
                raise ValueError(f"field {name!r} has the wrong length")
            out += [f"SCALARS {key} double 1", "LOOKUP_TABLE default"]
            out += [f"{a:.17g}" for a in v]
    return out


def write_matrix_market(path, matrix, comment: str = "") -> Path:
    """Write a sparse matrix in coordinate Matrix Market format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scipy.io.mmwrite(str(path), sps.coo_matrix(matrix), comment=comment)
    return path


def read_matrix_market(path):
    return scipy.io.mmread(str(path)).tocsr()
