"""Legacy ASCII VTK unstructured-grid output (and a reader for round trips)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

VTK_TRIANGLE = 5


def _fmt(v) -> str:
    return format(float(v), ".17g")


def export_vtk(path, vertices, triangles, point_data: dict, title: str = "fosls_seaice"):
    """Write ``point_data`` (name -> (N,) scalars or (N, 2|3) vectors) on a triangle mesh."""
    path = Path(path)
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    nv, nt = len(vertices), len(triangles)
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    pts = np.zeros((nv, 3))
    pts[:, : vertices.shape[1]] = vertices
    lines += [" ".join(_fmt(c) for c in p) for p in pts]
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in triangles]
    lines.append(f"CELL_TYPES {nt}")
    lines += [str(VTK_TRIANGLE)] * nt
    if point_data:
        lines.append(f"POINT_DATA {nv}")
    for name, values in point_data.items():
        values = np.asarray(values, dtype=float)
        if values.shape[0] != nv:
            raise ValueError(f"field {name!r} has {values.shape[0]} values for {nv} points")
        if values.ndim == 1:
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [_fmt(v) for v in values]
        else:
            vec = np.zeros((nv, 3))
            vec[:, : values.shape[1]] = values
            lines.append(f"VECTORS {name} double")
            lines += [" ".join(_fmt(c) for c in v) for v in vec]
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write VTK file {path}: {exc}") from exc
    return path


def read_vtk(path):
    """Parse a file written by :func:`export_vtk`; returns ``(points, cells, point_data)``."""
    tokens = Path(path).read_text().split("\n")
    i = 0
    points = cells = None
    data = {}
    n_points = 0
    while i < len(tokens):
        line = tokens[i].strip()
        head = line.split()
        if not head:
            i += 1
            continue
        if head[0] == "POINTS":
            n_points = int(head[1])
            points = np.array([[float(v) for v in tokens[i + 1 + k].split()] for k in range(n_points)])
            i += n_points + 1
        elif head[0] == "CELLS":
            n = int(head[1])
            cells = np.array([[int(v) for v in tokens[i + 1 + k].split()[1:]] for k in range(n)], dtype=np.int64)
            i += n + 1
        elif head[0] == "SCALARS":
            data[head[1]] = np.array([float(tokens[i + 2 + k]) for k in range(n_points)])
            i += n_points + 2
        elif head[0] == "VECTORS":
            data[head[1]] = np.array([[float(v) for v in tokens[i + 1 + k].split()] for k in range(n_points)])
            i += n_points + 1
        else:
            i += 1
    return points, cells, data
