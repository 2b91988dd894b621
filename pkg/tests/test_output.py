import csv
import json
import math

import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp

from hphdg.dg import DG
from hphdg.hdg import HDG
from hphdg.mesh import Mesh, square_mesh
from hphdg.output import (OutputError, read_json, read_vtk_counts, reference_subdivision,
                          write_csv, write_history_csv, write_json, write_matrix_market,
                          write_plot_data, write_solution_vtk, write_vtk)
from hphdg.report import CSV_COLUMNS, SCHEMA_VERSION, CycleRecord, RunReport
from hphdg.verification import mms_euler, mms_scalar


def single_triangle():
    b = "dirichlet-mms"
    return Mesh.from_arrays([[0, 0], [1, 0], [0, 1]], [(0, 1, 2)], [(0, 1, b), (1, 2, b), (2, 0, b)])


def sample_report():
    rep = RunReport("hdg", "mms-scalar", {"p0": 1, "adaptation": {"theta": 0.05}}, j_ref=0.4,
                    j_ref_label="exact")
    rep.add(CycleRecord(0, "hdg", 8, 24, 16, 64, 0.39, eta=0.011, error=0.01, effectivity=1.1,
                        plan={"counts": {"keep": 6, "h-refine": 2, "p-enrich": 0},
                              "degree_histogram": {1: 8}}))
    rep.add(CycleRecord(1, "hdg", 14, 42, 30, 120, 0.399, eta=None, error=float("nan")))
    return rep


@pytest.mark.parametrize("s", [1, 2, 3, 5])
def test_reference_subdivision_counts(s):
    pts, tris = reference_subdivision(s)
    assert len(pts) == (s + 1) * (s + 2) // 2 and len(tris) == s * s
    a = pts[tris]
    area = 0.5 * ((a[:, 1, 0] - a[:, 0, 0]) * (a[:, 2, 1] - a[:, 0, 1])
                  - (a[:, 2, 0] - a[:, 0, 0]) * (a[:, 1, 1] - a[:, 0, 1]))
    assert np.all(area > 0) and area.sum() == pytest.approx(2.0)


def test_single_element_vtk(tmp_path):
    case = mms_scalar()
    d = HDG(single_triangle(), case.problem, 1)
    path = tmp_path / "one.vtk"
    write_solution_vtk(path, d, d.project(case.exact), {"eta_K": [0.5], "S_K": [0.0]})
    info = read_vtk_counts(path)
    assert info["points"] == 3 and info["cells"] == 1
    assert info["fields"] == ["w", "p_K", "eta_K", "S_K"]
    text = path.read_text()
    assert "CELL_TYPES 1\n5\n" in text


def test_euler_vtk_fields(tmp_path):
    case = mms_euler()
    d = DG(square_mesh(2), case.problem, 2)
    path = tmp_path / "e.vtk"
    write_solution_vtk(path, d, d.project(case.exact))
    info = read_vtk_counts(path)
    assert info["cells"] == 8 * 4 and info["points"] == 8 * 6
    assert {"rho", "momentum", "p", "Ma", "p_K"} <= set(info["fields"])


def test_vtk_field_length_checked(tmp_path):
    with pytest.raises(ValueError):
        write_vtk(tmp_path / "x.vtk", [[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], {"a": [1.0, 2.0]})


def test_json_roundtrip(tmp_path):
    rep = sample_report()
    path = tmp_path / "r" / "report.json"
    write_json(rep, path)
    data = json.loads(path.read_text())
    assert data["schema_version"] == SCHEMA_VERSION
    assert data["cycles"][1]["error"] is None  # NaN is not valid JSON
    back = read_json(path)
    assert back.cycles[0].plan["degree_histogram"] == {"1": 8}  # JSON keys are strings
    assert back.cycles[0].eta == 0.011 and back.cycles[1].error is None
    assert back.column("ndof_w") == [24, 42]
    assert back.j_ref == 0.4 and back.method == "hdg"


def test_json_rejects_foreign_files(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(OutputError):
        read_json(bad)
    bad.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(OutputError, match="schema"):
        read_json(bad)
    with pytest.raises(OutputError):
        read_json(tmp_path / "missing.json")


def test_cycles_must_increase():
    rep = sample_report()
    with pytest.raises(ValueError):
        rep.add(CycleRecord(1, "hdg", 1, 1, 1, 1, 0.0))


def test_csv_columns(tmp_path):
    path = tmp_path / "cycles.csv"
    write_csv(sample_report(), path)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert all(len(r) == len(CSV_COLUMNS) for r in rows)
    first = dict(zip(rows[0], rows[1]))
    assert first["n_h"] == "2" and first["n_keep"] == "6"


def test_history_csv(tmp_path):
    hist = [dict(iter=0, residual=1.0, cfl=0.0, linear_iters=0, wall_time_s=0.1),
            dict(iter=1, residual=1e-3, cfl=math.inf, linear_iters=4, wall_time_s=0.2)]
    path = tmp_path / "h.csv"
    write_history_csv(hist, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["iter", "residual", "cfl", "linear_iters", "wall_time_s"]
    assert rows[2][2] == "inf"


def test_plot_data(tmp_path):
    script = write_plot_data(sample_report(), tmp_path / "plot.dat")
    lines = (tmp_path / "plot.dat").read_text().splitlines()
    assert lines[0].startswith("#") and len(lines) == 3
    assert "nan" in lines[2]
    assert script.suffix == ".gp" and "plot.dat" in script.read_text()


def test_matrix_market_roundtrip(tmp_path):
    A = sp.random(12, 12, density=0.3, random_state=1, format="csr")
    write_matrix_market(tmp_path / "A.mtx", A, comment="test")
    B = scipy.io.mmread(str(tmp_path / "A.mtx"))
    assert abs(sp.csr_matrix(B) - A).max() < 1e-15


def test_unwritable_target_raises_output_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OutputError):
        write_json(sample_report(), blocker / "sub" / "report.json")
    with pytest.raises(OSError):
        write_csv(sample_report(), blocker / "cycles.csv")
