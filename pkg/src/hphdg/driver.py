"""Run orchestration: solve, adjoint, estimate, mark, decide, adapt; benchmarks."""
from __future__ import annotations

import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapt import apply_plan, decide_hp, mark_dorfler, smoothness_sensors
from .adjoint import estimate_error, solve_adjoint
from .config import RunConfig
from .dg import DG
from .hdg import HDG
from .krylov import LinearSolverError
from .mesh import MeshError, NacaCurve, load_mesh, naca_ogrid, square_mesh
from .output import (write_csv, write_history_csv, write_json, write_matrix_market, write_rows,
                     write_solution_vtk, write_text)
from .physics import WALL_TAGS, ConfigError, Problem, TargetFunctional, make_model
from .report import CycleRecord, RunReport
from .solver import NonConvergenceError, nonlinear_solve
from .space import DegreeMap, triangle_quadrature
from .verification import layer_scalar, mms_euler, mms_scalar, step_forcing_scalar

log = logging.getLogger("hphdg")

METHOD_CLASSES = {"hdg": HDG, "dg": DG}
OUTPUT_ENV = "HPHDG_OUTPUT_DIR"
ADJOINT_RTOL = 1e-10
COMPARISON_COLUMNS = ("cycle", "ndof_w_hdg", "ndof_w_dg", "t_hdg", "t_dg", "t_ratio_dg_hdg",
                      "nnz_hdg", "nnz_dg", "nnz_ratio_dg_hdg")
BENCHMARK_COLUMNS = ("p", "method", "n_elements", "ndof_w", "ndof_lambda", "nnz", "J_h",
                     "converged", "newton_iters", "gmres_iters", "t_assembly", "t_linear", "t_solve")


@dataclass
class Setup:
    mesh: object
    problem: Problem
    j_ref: float | None
    j_ref_label: str


# ---------------------------------------------------------------------------
# Setup
# ---------------------------------------------------------------------------

def resolve_mesh(spec: str, wall_tag: str = "slip-wall", wall_curve: str = "none"):
    """``square:N``, ``naca:N_AROUND:N_RADIAL[:RADIUS]`` or a mesh file path."""
    parts = spec.split(":")
    try:
        if parts[0] == "square" and len(parts) == 2:
            return square_mesh(int(parts[1]))
        if parts[0] == "naca" and len(parts) in (3, 4):
            radius = float(parts[3]) if len(parts) == 4 else 10.0
            return naca_ogrid(int(parts[1]), int(parts[2]), radius, wall_tag=wall_tag)
    except ValueError as exc:
        raise ConfigError(f"bad mesh specification {spec!r}: {exc}") from None
    if parts[0] in ("square", "naca"):
        raise ConfigError(f"bad mesh specification {spec!r}")
    mesh = load_mesh(spec)
    if wall_curve == "naca0012":
        tags = set(mesh.boundary_tags) & set(WALL_TAGS)
        mesh = mesh.with_curves({t: NacaCurve() for t in tags})
    return mesh


def _is_unit_square(mesh) -> bool:
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    return bool(np.allclose(lo, 0.0) and np.allclose(hi, 1.0)
                and abs(mesh.element_areas().sum() - 1.0) < 1e-12)


def mesh_integral(mesh, func, degree: int = 20) -> float:
    """Sum of all components of ``func`` integrated over the mesh."""
    q = triangle_quadrature(degree)
    pts, J = mesh.map_reference(q.points)
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    vals = np.asarray(func(pts.reshape(-1, 2))).reshape(pts.shape[0], pts.shape[1], -1).sum(-1)
    return float(np.sum(vals * det * q.weights))


def build_setup(cfg: RunConfig) -> Setup:
    """Mesh, problem and reference functional value for a configuration."""
    mdl = cfg.model
    wall = "no-slip-adiabatic" if mdl["name"] == "navier-stokes" else "slip-wall"
    mesh = resolve_mesh(cfg.mesh, wall, cfg.wall_curve)
    case = None
    if cfg.case == "mms-scalar":
        case = mms_scalar(b=mdl.get("advection", (1.0, 0.0)), nu=mdl.get("diffusivity", 0.1))
    elif cfg.case == "layer-scalar":
        case = layer_scalar(nu=mdl.get("diffusivity", 1.0))
    elif cfg.case == "step-scalar":
        case = step_forcing_scalar(nu=mdl.get("diffusivity", 1.0))
    elif cfg.case == "mms-euler":
        case = mms_euler(gamma=mdl.get("gamma", 1.4))
        case.problem.functional = TargetFunctional("mms-volume")
    if case is not None:
        problem = case.problem
        if case.J_exact is not None and _is_unit_square(mesh):
            j_ref, label = case.J_exact, "exact"
        elif case.exact is not None:
            j_ref, label = mesh_integral(mesh, case.exact), "exact (quadrature)"
        else:
            j_ref, label = None, ""
    else:
        kw = {k: mdl[k] for k in ("mach", "aoa", "reynolds", "gamma", "prandtl") if k in mdl}
        if mdl["name"] == "scalar":
            kw = {"b": mdl.get("advection", (1.0, 0.0)), "nu": mdl.get("diffusivity", 0.0)}
        model = make_model(mdl["name"], **kw)
        if cfg.functional == "mms-volume":
            fun = TargetFunctional("mms-volume")
        else:
            fun = TargetFunctional(cfg.functional, aoa_deg=model.gas.aoa_deg, c_inf=model.gas.c_inf())
        problem = Problem(model, functional=fun)
        j_ref, label = None, ""
    if cfg.j_ref is not None:
        j_ref, label = cfg.j_ref, "config (self-reference)" if cfg.case == "flow" else "config"
    return Setup(mesh, problem, j_ref, label)


def output_root(cfg: RunConfig, override=None) -> Path:
    if override is not None:
        return Path(override)
    env = os.environ.get(OUTPUT_ENV)
    return Path(env) if env else Path(cfg.output_dir)


def make_discretization(method: str, mesh, problem, p, cfg: RunConfig):
    pk = np.full(mesh.n_elements, int(p), dtype=int) if np.ndim(p) == 0 else np.asarray(p)
    degrees = DegreeMap(mesh, pk, 0, max(cfg.adaptation.p_max, int(pk.max())))
    return METHOD_CLASSES[method](mesh, problem, degrees, cfg.stabilization)


# ---------------------------------------------------------------------------
# Adaptive runs
# ---------------------------------------------------------------------------

def _gmres_total(result) -> int:
    return int(sum(h["linear_iters"] for h in result.history))


def run_adaptive(cfg: RunConfig, method: str | None = None, output_dir=None,
                 setup: Setup | None = None) -> RunReport:
    """Adaptation loop for one method; writes VTK, CSV and JSON under ``output_dir``.

    ``max(max_cycles, 1)`` primal solves are performed; the plan computed after
    the last one is reported but not applied. A run stops early once the
    functional error is known and the target is met. Raises
    NonConvergenceError after writing the report when a solve fails.
    """
    method = method or cfg.method
    if method not in METHOD_CLASSES:
        raise ConfigError(f"run_adaptive needs method hdg or dg, got {method!r}")
    setup = setup or build_setup(cfg)
    out = Path(output_dir) if output_dir is not None else output_root(cfg) / method
    report = RunReport(method, cfg.case, cfg.to_dict(), setup.j_ref, setup.j_ref_label)
    disc = make_discretization(method, setup.mesh, setup.problem, cfg.p0, cfg)
    adj_linear = dataclasses.replace(cfg.linear, rtol=min(cfg.linear.rtol, ADJOINT_RTOL))
    n_cycles = max(cfg.adaptation.max_cycles, 1)
    x = None
    try:
        for cycle in range(1, n_cycles + 1):
            t0 = time.perf_counter()
            log.info("[%s] cycle %d: %d elements, ndof_w = %d", method, cycle,
                     disc.mesh.n_elements, disc.ndof_w)
            res = nonlinear_solve(disc, x0=x, config=cfg.continuation, linear=cfg.linear,
                                  log=log.debug)
            t_solve = time.perf_counter() - t0
            write_history_csv(res.history, out / f"newton_{cycle:02d}.csv")
            if cfg.dump_matrices:
                _dump(disc, res.x, out, cycle)
            record = CycleRecord(
                cycle, method, disc.mesh.n_elements, disc.ndof_w,
                int(getattr(disc, "n_lambda", 0)), disc.nnz(), math.nan,
                converged=res.converged, newton_iters=res.iterations,
                gmres_iters=_gmres_total(res), t_assembly=res.timings["assembly"],
                t_linear=res.timings["linear"], t_solve=t_solve)
            if not res.converged:
                record.t_total = time.perf_counter() - t0
                report.add(record)
                raise NonConvergenceError(f"{method} cycle {cycle}: {res.message}", res)
            x = res.x
            record.J_h = disc.functional(x)
            ta = time.perf_counter()
            adjoint = solve_adjoint(disc, x, adj_linear)
            est = estimate_error(adjoint, cfg.indicator, setup.j_ref, record.J_h)
            record.t_adjoint = time.perf_counter() - ta
            record.adjoint_iters = int(adjoint.iterations)
            record.eta = est.eta
            if setup.j_ref is not None:
                record.error = abs(setup.j_ref - record.J_h)
                record.effectivity = est.eta / est.e_ref if est.e_ref else None
            sensors = smoothness_sensors(disc, x, cfg.adaptation.sensor)
            marked = mark_dorfler(est.eta_K, cfg.adaptation.theta)
            plan = decide_hp(marked, sensors, disc.degrees, cfg.adaptation)
            summary = plan.summary()
            summary["degree_histogram"] = {str(k): v for k, v in summary["degree_histogram"].items()}
            record.plan = summary
            if cfg.write_vtk:
                write_solution_vtk(out / f"cycle_{cycle:02d}.vtk", disc, x,
                                   {"eta_K": est.eta_K, "S_K": sensors}, cfg.vtk_subdivision)
            done = cycle == n_cycles or (
                cfg.target_error is not None and record.error is not None
                and record.error <= cfg.target_error)
            if not done:
                disc, x, _ = apply_plan(disc, x, plan)
            record.t_total = time.perf_counter() - t0
            report.add(record)
            log.info("[%s] cycle %d: J_h = %.12g  eta = %.3e  error = %s  newton = %d  gmres = %d",
                     method, cycle, record.J_h, record.eta,
                     "n/a" if record.error is None else f"{record.error:.3e}",
                     record.newton_iters, record.gmres_iters)
            if done:
                break
    except (NonConvergenceError, LinearSolverError) as exc:
        report.failed = True
        report.message = str(exc)
        _write_report(report, out)
        if isinstance(exc, NonConvergenceError):
            raise
        raise NonConvergenceError(f"{method}: {exc}") from None
    report.message = "completed"
    _write_report(report, out)
    return report


def _write_report(report: RunReport, out: Path) -> None:
    write_json(report, out / "report.json")
    write_csv(report, out / "cycles.csv")


def _dump(disc, x, out: Path, cycle: int) -> None:
    lin = disc.linearize(x)
    write_matrix_market(out / f"jacobian_{cycle:02d}.mtx", lin.full_matrix(),
                        comment=f"{disc.method} Newton matrix, cycle {cycle}")
    if disc.method == "hdg" and disc.n_lambda:
        K, _ = lin.condense()
        write_matrix_market(out / f"condensed_{cycle:02d}.mtx", K,
                            comment=f"condensed trace matrix, cycle {cycle}")


def comparison_rows(hdg: RunReport, dg: RunReport) -> list:
    rows = []
    for a, b in zip(hdg.cycles, dg.cycles):
        rows.append([a.cycle, a.ndof_w, b.ndof_w, a.t_solve, b.t_solve,
                     b.t_solve / a.t_solve if a.t_solve > 0 else math.nan,
                     a.nnz, b.nnz, b.nnz / a.nnz if a.nnz else math.nan])
    return rows


def run(cfg: RunConfig, output_dir=None) -> list:
    """Run the configured method(s). ``both`` adds a comparison table."""
    root = output_root(cfg, output_dir)
    if cfg.method != "both":
        return [run_adaptive(cfg, cfg.method, root)]
    setup = build_setup(cfg)
    reports, failure = {}, None
    for method in ("hdg", "dg"):
        try:
            reports[method] = run_adaptive(cfg, method, root / method, setup)
        except NonConvergenceError as exc:
            failure = failure or exc
    if len(reports) == 2:
        write_rows(root / "comparison.csv", COMPARISON_COLUMNS,
                   comparison_rows(reports["hdg"], reports["dg"]))
    if failure is not None:
        raise failure
    return [reports["hdg"], reports["dg"]]


# ---------------------------------------------------------------------------
# Fixed-mesh benchmark
# ---------------------------------------------------------------------------

def benchmark_fixed_mesh(cfg: RunConfig, p_min: int, p_max: int, output_dir=None) -> list:
    """Solve with uniform degree p on the configured mesh for both methods.

    Returns rows (dicts) in ``BENCHMARK_COLUMNS`` order and writes
    ``benchmark.csv`` plus ``benchmark.dat`` (one line per p with the
    DG/HDG ratios) to the output directory.
    """
    if p_min < 0 or p_max < p_min:
        raise ConfigError("need 0 <= p_min <= p_max")
    setup = build_setup(cfg)
    root = output_root(cfg, output_dir)
    rows = []
    failure = None
    for p in range(p_min, p_max + 1):
        for method in ("hdg", "dg"):
            disc = make_discretization(method, setup.mesh, setup.problem, p, cfg)
            t0 = time.perf_counter()
            res = nonlinear_solve(disc, config=cfg.continuation, linear=cfg.linear, log=log.debug)
            t = time.perf_counter() - t0
            rows.append(dict(p=p, method=method, n_elements=disc.mesh.n_elements,
                             ndof_w=disc.ndof_w, ndof_lambda=int(getattr(disc, "n_lambda", 0)),
                             nnz=disc.nnz(), J_h=disc.functional(res.x) if res.converged else math.nan,
                             converged=res.converged, newton_iters=res.iterations,
                             gmres_iters=_gmres_total(res), t_assembly=res.timings["assembly"],
                             t_linear=res.timings["linear"], t_solve=t))
            log.info("benchmark p=%d %s: nnz = %d  t = %.2fs  converged = %s", p, method,
                     disc.nnz(), t, res.converged)
            if not res.converged and failure is None:
                failure = NonConvergenceError(f"benchmark p={p} {method}: {res.message}", res)
    write_rows(root / "benchmark.csv", BENCHMARK_COLUMNS, [[r[c] for c in BENCHMARK_COLUMNS] for r in rows])
    lines = ["# p t_hdg t_dg t_ratio_dg_hdg nnz_hdg nnz_dg nnz_ratio_dg_hdg"]
    for h, d in zip(rows[0::2], rows[1::2]):
        lines.append(f"{h['p']} {h['t_solve']:.6g} {d['t_solve']:.6g} {d['t_solve'] / h['t_solve']:.6g} "
                     f"{h['nnz']} {d['nnz']} {d['nnz'] / h['nnz'] if h['nnz'] else math.nan:.6g}")
    write_text(root / "benchmark.dat", "\n".join(lines) + "\n")
    if failure is not None:
        raise failure
    return rows


__all__ = ["Setup", "build_setup", "resolve_mesh", "mesh_integral", "run_adaptive", "run",
           "benchmark_fixed_mesh", "comparison_rows", "make_discretization", "MeshError"]
