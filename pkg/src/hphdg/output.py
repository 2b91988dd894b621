"""File outputs: legacy VTK fields, CSV tables, JSON reports and plot data."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .report import CSV_COLUMNS, RunReport


class OutputError(OSError):
    pass


def _guard(path, action):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return action(path)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from None


# ---------------------------------------------------------------------------
# VTK
# ---------------------------------------------------------------------------

def reference_subdivision(s: int):
    """Points (reference coordinates) and triangles of a uniform s-fold split."""
    s = max(int(s), 1)
    idx = {}
    pts = []
    for j in range(s + 1):
        for i in range(s + 1 - j):
            idx[i, j] = len(pts)
            pts.append((-1.0 + 2.0 * i / s, -1.0 + 2.0 * j / s))
    tris = []
    for j in range(s):
        for i in range(s - j):
            tris.append((idx[i, j], idx[i + 1, j], idx[i, j + 1]))
            if i + j < s - 1:
                tris.append((idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]))
    return np.array(pts), np.array(tris, dtype=int)


def sample_fields(disc, x, subdivision: int = 0):
    """Sample the state on sub-triangles of every element.

    ``subdivision=0`` splits element K into max(p_K, 1)^2 sub-cells. Returns
    points (N, 2), triangles (M, 3), point data {name: (N,) or (N, 2)} and the
    parent element of every sub-cell. Points are duplicated per element, so
    discontinuities between elements are kept.
    """
    mesh = disc.mesh
    model = disc.model
    levels = np.array([subdivision if subdivision > 0 else max(int(p), 1)
                       for p in disc.degrees.p_K])
    points, tris, states, parent = [], [], [], []
    offset = 0
    for s in np.unique(levels):
        elems = np.flatnonzero(levels == s)
        xi, sub = reference_subdivision(int(s))
        phys, _ = mesh.map_reference(xi, elems)
        vals = disc.state_at(x, xi, elems)
        for b, K in enumerate(elems):
            points.append(phys[b])
            states.append(vals[b])
            tris.append(sub + offset)
            parent.append(np.full(len(sub), K))
            offset += len(xi)
    # restore element order of the sub-cells
    order = np.argsort(np.concatenate(parent), kind="stable")
    points = np.concatenate(points)
    W = np.concatenate(states)
    tris = np.concatenate(tris)[order]
    parent = np.concatenate(parent)[order]
    data = {}
    if model.m == 1:
        data["w"] = W[:, 0]
    else:
        for c, name in enumerate(("rho", "rho_u", "rho_v", "rho_E")):
            data[name] = W[:, c]
        data["momentum"] = W[:, 1:3]
        g = model.gamma
        p = (g - 1.0) * (W[:, 3] - 0.5 * (W[:, 1] ** 2 + W[:, 2] ** 2) / W[:, 0])
        c = np.sqrt(np.abs(g * p / W[:, 0]))
        data["p"] = p
        data["Ma"] = np.hypot(W[:, 1], W[:, 2]) / W[:, 0] / c
    return points, tris, data, parent


def write_vtk(path, points, triangles, point_data=None, cell_data=None, title="hphdg") -> None:
    """Legacy ASCII unstructured grid of triangles (VTK cell type 5)."""
    points = np.asarray(points, dtype=float)
    triangles = np.asarray(triangles, dtype=int)
    n, m = len(points), len(triangles)
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {n} double"]
    lines += [f"{a:.16g} {b:.16g} 0" for a, b in points]
    lines.append(f"CELLS {m} {4 * m}")
    lines += [f"3 {a} {b} {c}" for a, b, c in triangles]
    lines.append(f"CELL_TYPES {m}")
    lines += ["5"] * m
    for kind, count, data in (("POINT_DATA", n, point_data), ("CELL_DATA", m, cell_data)):
        if not data:
            continue
        lines.append(f"{kind} {count}")
        for name, vals in data.items():
            vals = np.asarray(vals, dtype=float)
            if len(vals) != count:
                raise ValueError(f"field {name} has {len(vals)} values, expected {count}")
            if vals.ndim == 2:
                lines.append(f"VECTORS {name} double")
                lines += [f"{a:.16g} {b:.16g} 0" for a, b in vals]
            else:
                lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                lines += [f"{v:.16g}" for v in vals]
    _guard(path, lambda p: p.write_text("\n".join(lines) + "\n"))


def write_solution_vtk(path, disc, x, cell_fields=None, subdivision: int = 0) -> None:
    """Sampled state plus per-element fields (repeated on every sub-cell)."""
    pts, tris, pdata, parent = sample_fields(disc, x, subdivision)
    cdata = {"p_K": disc.degrees.p_K[parent]}
    for name, vals in (cell_fields or {}).items():
        cdata[name] = np.asarray(vals, dtype=float)[parent]
    write_vtk(path, pts, tris, pdata, cdata)


def read_vtk_counts(path) -> dict:
    """Point and cell counts plus field names of a legacy VTK file (for checks)."""
    text = Path(path).read_text().split("\n")
    out = {"fields": []}
    for line in text:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "POINTS":
            out["points"] = int(tok[1])
        elif tok[0] == "CELLS":
            out["cells"] = int(tok[1])
        elif tok[0] in ("SCALARS", "VECTORS"):
            out["fields"].append(tok[1])
    return out


# ---------------------------------------------------------------------------
# Tables and reports
# ---------------------------------------------------------------------------

def write_text(path, text: str) -> None:
    _guard(path, lambda p: p.write_text(text))


def write_rows(path, header, rows) -> None:
    def action(p):
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    _guard(path, action)


def write_csv(report: RunReport, path) -> None:
    """Per-cycle table with the fixed ``CSV_COLUMNS`` header."""
    write_rows(path, CSV_COLUMNS, [r.row() for r in report.cycles])


def write_history_csv(history, path) -> None:
    cols = ("iter", "residual", "cfl", "linear_iters", "wall_time_s")
    write_rows(path, cols, [[h[c] for c in cols] for h in history])


def write_json(report: RunReport, path) -> None:
    _guard(path, lambda p: p.write_text(json.dumps(report.to_dict(), indent=2) + "\n"))


def read_json(path) -> RunReport:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OutputError(f"cannot read {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise OutputError(f"{path} is not valid JSON: {exc}") from None
    try:
        return RunReport.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise OutputError(f"{path} is not a run report: {exc}") from None


def write_plot_data(report: RunReport, path) -> Path:
    """Whitespace-separated columns for gnuplot plus a small script next to it."""
    path = Path(path)
    cols = ("cycle", "ndof_w", "nnz", "J_h", "eta", "error", "t_solve")
    body = ["# " + " ".join(cols)]
    for r in report.cycles:
        body.append(" ".join("nan" if getattr(r, c) is None else f"{getattr(r, c):.16g}"
                             for c in cols))
    _guard(path, lambda p: p.write_text("\n".join(body) + "\n"))
    script = path.with_suffix(".gp")
    gp = [
        "set logscale xy",
        "set xlabel 'ndof_w'",
        f"plot '{path.name}' using 2:6 with linespoints title '|J_ref - J_h|', \\",
        f"     '{path.name}' using 2:(abs($5)) with linespoints title '|eta|'",
    ]
    _guard(script, lambda p: p.write_text("\n".join(gp) + "\n"))
    return script


def write_matrix_market(path, matrix, comment: str = "") -> None:
    from scipy.io import mmwrite

    _guard(path, lambda p: mmwrite(str(p), matrix, comment=comment))
