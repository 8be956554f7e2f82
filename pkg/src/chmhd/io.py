"""VTK snapshots, CSV tables and run metadata."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np


class OutputError(OSError):
    pass


def _open(path, mode="w"):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, mode, newline="")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def write_vtk(state, path, title: str = "chmhd state") -> None:
    """Legacy ASCII unstructured grid with nodal phi, omega, p, velocity and B.

    Velocity is the nodal (P1) part of the MINI field, which equals the
    field value at the vertices.
    """
    mesh = state.mesh
    n, T = mesh.n_nodes, mesh.n_triangles
    vel = state.vel.coeffs
    nu = state.vel.space.n_scalar
    u = np.column_stack([vel[:n], vel[nu:nu + n], np.zeros(n)])
    B = np.column_stack([state.mag.coeffs[:n], state.mag.coeffs[n:2 * n], np.zeros(n)])
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {n} double"]
    lines += [f"{x!r} {y!r} 0.0" for x, y in mesh.nodes.tolist()]
    lines.append(f"CELLS {T} {4 * T}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    lines.append(f"CELL_TYPES {T}")
    lines += ["5"] * T
    lines.append(f"POINT_DATA {n}")
    for name, arr in (("phi", state.phi.coeffs), ("omega", state.omega.coeffs), ("p", state.pres.coeffs)):
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [repr(v) for v in np.asarray(arr, dtype=float).tolist()]
    for name, arr in (("velocity", u), ("magnetic", B)):
        lines.append(f"VECTORS {name} double")
        lines += [f"{a!r} {b!r} {c!r}" for a, b, c in arr.tolist()]
    with _open(path) as fh:
        fh.write("\n".join(lines) + "\n")


def read_vtk_points_cells(path) -> tuple[np.ndarray, np.ndarray]:
    """Minimal reader for files produced by :func:`write_vtk`."""
    tokens = Path(path).read_text().split("\n")
    i = next(k for k, t in enumerate(tokens) if t.startswith("POINTS"))
    n = int(tokens[i].split()[1])
    pts = np.array([[float(v) for v in tokens[i + 1 + k].split()] for k in range(n)])
    j = next(k for k, t in enumerate(tokens) if t.startswith("CELLS"))
    m = int(tokens[j].split()[1])
    cells = np.array([[int(v) for v in tokens[j + 1 + k].split()] for k in range(m)])
    return pts, cells


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(records: Iterable[Mapping], path, columns: list | None = None) -> None:
    """Header row then one row per record; floats at full precision."""
    rows = [dict(r) for r in records]
    if columns is None:
        columns = []
        for r in rows:
            columns += [k for k in r if k not in columns]
    with _open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def read_csv(path) -> list[dict]:
    """Rows as dicts, numeric fields converted to int or float."""
    def conv(s):
        for t in (int, float):
            try:
                return t(s)
            except ValueError:
                pass
        return s

    with open(path, newline="") as fh:
        return [{k: conv(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_metadata(meta: Mapping, path) -> None:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, Path):
            return str(o)
        if isinstance(o, tuple):
            return list(o)
        raise TypeError(type(o).__name__)

    with _open(path) as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=default)
        fh.write("\n")
