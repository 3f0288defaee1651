"""Machine-readable exports: VTK legacy meshes, CSV tables, JSON reports.

All floating-point values are written with 17 significant digits so
every exported number round-trips exactly and downstream reports can be
recomputed bit-for-bit from the artifacts.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .coherent import LevelSetCurve, LevelVelocityField
from .mesh import TriMesh
from .spectral import EigenPair


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_mesh_vtk(path, mesh: TriMesh, point_data: dict[str, np.ndarray] | None = None) -> None:
    """Legacy ASCII VTK unstructured grid with triangle cells."""
    lines = [
        "# vtk DataFile Version 3.0",
        "dynlap mesh",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_nodes} double",
    ]
    lines += [f"{fmt(x)} {fmt(y)} 0" for x, y in mesh.nodes]
    t = mesh.n_triangles
    lines.append(f"CELLS {t} {4 * t}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {t}")
    lines += ["5"] * t
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_nodes}")
        for name, values in point_data.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines += [fmt(v) for v in np.asarray(values)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_mesh_csv(outdir, mesh: TriMesh) -> tuple[Path, Path]:
    """nodes.csv (id,x,y) and tris.csv (id,n0,n1,n2) in ``outdir``."""
    outdir = Path(outdir)
    nodes_path = outdir / "nodes.csv"
    tris_path = outdir / "tris.csv"
    with nodes_path.open("w") as f:
        f.write("id,x,y\n")
        for i, (x, y) in enumerate(mesh.nodes):
            f.write(f"{i},{fmt(x)},{fmt(y)}\n")
    with tris_path.open("w") as f:
        f.write("id,n0,n1,n2\n")
        for i, (a, b, c) in enumerate(mesh.triangles):
            f.write(f"{i},{a},{b},{c}\n")
    return nodes_path, tris_path


def write_spectrum_csv(path, pairs: list[EigenPair]) -> None:
    with Path(path).open("w") as f:
        f.write("index,lambda\n")
        for i, pair in enumerate(pairs):
            f.write(f"{i},{fmt(pair.lam)}\n")


def write_field_csv(path, mesh: TriMesh, columns: dict[str, np.ndarray]) -> None:
    """Per-node table: id, x, y plus one column per named field."""
    names = list(columns)
    with Path(path).open("w") as f:
        f.write("id,x,y," + ",".join(names) + "\n")
        for i, (x, y) in enumerate(mesh.nodes):
            vals = ",".join(fmt(columns[n][i]) for n in names)
            f.write(f"{i},{fmt(x)},{fmt(y)},{vals}\n")


def write_levelset_csv(path, curve: LevelSetCurve) -> None:
    with Path(path).open("w") as f:
        f.write("x0,y0,x1,y1,c\n")
        for seg in curve.segments:
            f.write(
                f"{fmt(seg[0, 0])},{fmt(seg[0, 1])},{fmt(seg[1, 0])},{fmt(seg[1, 1])},{fmt(curve.c)}\n"
            )


def write_velocity_csv(path, mesh: TriMesh, field: LevelVelocityField) -> None:
    with Path(path).open("w") as f:
        f.write("id,x,y,vx,vy,masked\n")
        for i, (x, y) in enumerate(mesh.nodes):
            vx, vy = field.vectors[i]
            f.write(f"{i},{fmt(x)},{fmt(y)},{fmt(vx)},{fmt(vy)},{int(field.masked[i])}\n")


def write_matrix_coo(path, mat: sp.spmatrix) -> None:
    """Coordinate-format text dump (row col value), row-major order."""
    coo = mat.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with Path(path).open("w") as f:
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            f.write(f"{r} {c} {fmt(v)}\n")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj]
    return obj
