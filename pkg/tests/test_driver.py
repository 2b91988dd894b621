import csv
import json

import numpy as np
import pytest

from hphdg.adapt import decide_hp, mark_dorfler, smoothness_sensors
from hphdg.adjoint import estimate_error, solve_adjoint
from hphdg.config import parse_config
from hphdg.driver import (BENCHMARK_COLUMNS, COMPARISON_COLUMNS, OUTPUT_ENV, benchmark_fixed_mesh,
                          build_setup, make_discretization, output_root, resolve_mesh, run,
                          run_adaptive)
from hphdg.mesh import MeshError
from hphdg.output import read_json, read_vtk_counts
from hphdg.physics import ConfigError
from hphdg.report import CSV_COLUMNS
from hphdg.solver import nonlinear_solve


MMS = "case = mms-scalar\nmethod = hdg\np0 = 1\nmesh = square:2"


def test_mms_h_run_error_decreases_and_writes_artifacts(tmp_path):
    cfg = parse_config(f"[run]\n{MMS}\n[adaptation]\nmode = h\nmax_cycles = 4\n")
    rep = run_adaptive(cfg, output_dir=tmp_path)
    assert len(rep.cycles) == 4
    assert rep.j_ref_label == "exact"
    err = rep.column("error")
    assert all(b < a for a, b in zip(err[1:], err[2:]))
    assert err[-1] < err[0]
    ndof = rep.column("ndof_w")
    assert all(b > a for a, b in zip(ndof, ndof[1:]))
    for name in ("report.json", "cycles.csv", "newton_01.csv", "cycle_01.vtk", "cycle_04.vtk"):
        assert (tmp_path / name).exists(), name
    vtk = read_vtk_counts(tmp_path / "cycle_01.vtk")
    assert {"w", "p_K", "eta_K", "S_K"} <= set(vtk["fields"])
    with open(tmp_path / "cycles.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 5
    back = read_json(tmp_path / "report.json")
    assert back.column("J_h") == rep.column("J_h")


def test_records_match_discretization_counts(tmp_path):
    cfg = parse_config(f"[run]\n{MMS}\nwrite_vtk = false\n[adaptation]\nmode = hp\nmax_cycles = 2\n")
    rep = run_adaptive(cfg, output_dir=tmp_path)
    first = rep.cycles[0]
    setup = build_setup(cfg)
    disc = make_discretization("hdg", setup.mesh, setup.problem, 1, cfg)
    assert first.nnz == disc.nnz()
    assert first.ndof_w == disc.ndof_w
    assert first.ndof_lambda == disc.n_lambda
    assert [r.cycle for r in rep.cycles] == [1, 2]


@pytest.mark.parametrize("p0", [1, 2])
def test_h_verdicts_cluster_at_forcing_discontinuity(p0):
    x_step = 0.45
    cfg = parse_config(f"[run]\ncase = step-scalar\np0 = {p0}\nmesh = square:8\n"
                       "[adaptation]\nmode = hp\ntheta = 0.3\n")
    s = build_setup(cfg)
    disc = make_discretization("hdg", s.mesh, s.problem, p0, cfg)
    x = nonlinear_solve(disc).x
    est = estimate_error(solve_adjoint(disc, x))
    marked = mark_dorfler(est.eta_K, cfg.adaptation.theta)
    plan = decide_hp(marked, smoothness_sensors(disc, x, cfg.adaptation.sensor),
                     disc.degrees, cfg.adaptation)
    V = disc.mesh.vertices[disc.mesh.elements]
    cut = (V[:, :, 0].min(axis=1) < x_step) & (V[:, :, 0].max(axis=1) > x_step)
    assert len(plan.h_set) > 0
    assert cut[plan.h_set].mean() >= 0.6
    # the cut layer is a small part of the mesh, so this is not a trivial pass
    assert cut.mean() < 0.2


def test_method_both_writes_comparison(tmp_path):
    cfg = parse_config("[run]\ncase = mms-scalar\nmethod = both\np0 = 1\nmesh = square:2\n"
                       "write_vtk = false\n[adaptation]\nmode = h\nmax_cycles = 2\n")
    reports = run(cfg, tmp_path)
    assert [r.method for r in reports] == ["hdg", "dg"]
    assert (tmp_path / "hdg" / "report.json").exists()
    assert (tmp_path / "dg" / "report.json").exists()
    with open(tmp_path / "comparison.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == COMPARISON_COLUMNS
    assert len(rows) == 3
    for row, h, d in zip(rows[1:], reports[0].cycles, reports[1].cycles):
        rec = dict(zip(COMPARISON_COLUMNS, row))
        assert int(rec["nnz_hdg"]) == h.nnz and int(rec["nnz_dg"]) == d.nnz
        assert float(rec["nnz_ratio_dg_hdg"]) == pytest.approx(d.nnz / h.nnz)


def test_runs_are_deterministic(tmp_path):
    cfg = parse_config(f"[run]\n{MMS}\nwrite_vtk = false\n[adaptation]\nmode = hp\nmax_cycles = 2\n")
    a = run_adaptive(cfg, output_dir=tmp_path / "a")
    b = run_adaptive(cfg, output_dir=tmp_path / "b")
    assert a.column("J_h") == b.column("J_h")
    assert a.column("eta") == b.column("eta")


def test_target_error_stops_early(tmp_path):
    cfg = parse_config(f"[run]\n{MMS}\nwrite_vtk = false\ntarget_error = 1.0\n"
                       "[adaptation]\nmax_cycles = 5\n")
    rep = run_adaptive(cfg, output_dir=tmp_path)
    assert len(rep.cycles) == 1
    assert rep.message == "completed"


def test_max_cycles_zero_still_solves_once(tmp_path):
    cfg = parse_config(f"[run]\n{MMS}\nwrite_vtk = false\n[adaptation]\nmax_cycles = 0\n")
    rep = run_adaptive(cfg, output_dir=tmp_path)
    assert len(rep.cycles) == 1


def test_mms_euler_reference_from_quadrature():
    cfg = parse_config("[run]\ncase = mms-euler\nmesh = square:2\n")
    s = build_setup(cfg)
    assert s.j_ref_label == "exact (quadrature)"
    assert np.isfinite(s.j_ref)


def test_config_reference_is_labelled_self_reference():
    cfg = parse_config("[run]\ncase = flow\nmesh = square:2\nj_ref = 0.01\n"
                       "[functional]\nkind = pressure-drag\n")
    s = build_setup(cfg)
    assert s.j_ref == 0.01
    assert "self-reference" in s.j_ref_label


@pytest.mark.parametrize("spec", ["square:x", "square", "naca:10", "naca:a:b"])
def test_resolve_mesh_bad_spec(spec):
    with pytest.raises(ConfigError):
        resolve_mesh(spec)


def test_resolve_mesh_missing_file(tmp_path):
    with pytest.raises((MeshError, OSError)):
        resolve_mesh(str(tmp_path / "nope.mesh"))


def test_resolve_mesh_square():
    assert resolve_mesh("square:3").n_elements == 18


def test_output_root_precedence(tmp_path, monkeypatch):
    cfg = parse_config(f"[run]\n{MMS}\noutput_dir = {tmp_path / 'cfg'}\n")
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert output_root(cfg) == tmp_path / "cfg"
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert output_root(cfg) == tmp_path / "env"
    assert output_root(cfg, tmp_path / "arg") == tmp_path / "arg"


def test_unknown_method_rejected(tmp_path):
    cfg = parse_config(f"[run]\n{MMS}\n")
    with pytest.raises(ConfigError):
        run_adaptive(cfg, method="fv", output_dir=tmp_path)


def test_nonconvergence_writes_failed_report(tmp_path):
    from hphdg.solver import NonConvergenceError

    cfg = parse_config("[run]\ncase = mms-euler\nmesh = square:2\nwrite_vtk = false\n"
                       "[continuation]\nmax_newton = 1\n")
    with pytest.raises(NonConvergenceError):
        run_adaptive(cfg, output_dir=tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["failed"] is True
    assert data["cycles"][0]["converged"] is False


def test_benchmark_fixed_mesh(tmp_path):
    cfg = parse_config("[run]\ncase = mms-scalar\nmesh = square:3\n")
    rows = benchmark_fixed_mesh(cfg, 0, 2, tmp_path)
    assert [(r["p"], r["method"]) for r in rows] == [
        (0, "hdg"), (0, "dg"), (1, "hdg"), (1, "dg"), (2, "hdg"), (2, "dg")]
    assert all(r["converged"] for r in rows)
    ratios = [d["nnz"] / h["nnz"] for h, d in zip(rows[0::2], rows[1::2])]
    assert ratios[0] < 1.0
    assert ratios[1] < ratios[2]
    with open(tmp_path / "benchmark.csv") as fh:
        assert tuple(next(csv.reader(fh))) == BENCHMARK_COLUMNS
    dat = (tmp_path / "benchmark.dat").read_text().strip().split("\n")
    assert len(dat) == 4 and dat[0].startswith("#")


def test_benchmark_bad_range(tmp_path):
    cfg = parse_config("[run]\ncase = mms-scalar\nmesh = square:2\n")
    with pytest.raises(ConfigError):
        benchmark_fixed_mesh(cfg, 2, 1, tmp_path)
