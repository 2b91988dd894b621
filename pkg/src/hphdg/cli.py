"""Command-line entry point.

Exit codes: 0 success, 2 non-convergence, 3 configuration error, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .krylov import LinearSolverError
from .mesh import MeshError
from .physics import AdmissibilityError, ConfigError
from .solver import NonConvergenceError

EXIT_OK, EXIT_NONCONVERGENCE, EXIT_CONFIG, EXIT_IO = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hphdg", description="hp-adaptive HDG / DG flow solver")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more log output")
    ap.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="run configuration (INI)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override a configuration key")
        p.add_argument("--output-dir", help="output directory (overrides config and environment)")

    p = sub.add_parser("solve", help="adaptive solve")
    common(p)
    p.add_argument("--method", choices=("hdg", "dg", "both"), help="override run.method")
    p.add_argument("--dump-matrices", action="store_true",
                   help="write Newton matrices in MatrixMarket format every cycle")
    p = sub.add_parser("benchmark", help="HDG vs DG on a fixed mesh for a range of degrees")
    common(p)
    p.add_argument("--p-min", type=int, default=0)
    p.add_argument("--p-max", type=int, default=3)
    p = sub.add_parser("mesh-info", help="print mesh statistics as JSON")
    p.add_argument("mesh", help="mesh file, square:N or naca:N:M[:R]")
    p = sub.add_parser("report-plot", help="write gnuplot data for a run report")
    p.add_argument("report", help="report.json written by solve")
    p.add_argument("--output", help="data file (default: <report>_plot.dat)")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 0 else logging.INFO)
    logging.basicConfig(level=level, format="%(message)s")
    logging.getLogger("jax").setLevel(logging.ERROR)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergenceError, LinearSolverError, AdmissibilityError) as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (OSError, MeshError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def _dispatch(args) -> int:
    from . import driver, output

    if args.command == "mesh-info":
        mesh = driver.resolve_mesh(args.mesh)
        print(json.dumps(mesh.info(), indent=2))
        return EXIT_OK
    if args.command == "report-plot":
        report = output.read_json(args.report)
        path = Path(args.output) if args.output else Path(args.report).with_name(
            Path(args.report).stem + "_plot.dat")
        script = output.write_plot_data(report, path)
        print(f"wrote {path} and {script}")
        return EXIT_OK
    overrides = list(args.overrides)
    if getattr(args, "method", None):
        overrides.append(f"run.method={args.method}")
    if getattr(args, "dump_matrices", False):
        overrides.append("run.dump_matrices=true")
    cfg = load_config(args.config, overrides)
    if args.command == "solve":
        reports = driver.run(cfg, args.output_dir)
        for rep in reports:
            last = rep.cycles[-1]
            err = "n/a" if last.error is None else f"{last.error:.3e}"
            print(f"{rep.method}: {len(rep.cycles)} cycles, J_h = {last.J_h:.12g}, "
                  f"eta = {last.eta:.3e}, error = {err}")
        return EXIT_OK
    rows = driver.benchmark_fixed_mesh(cfg, args.p_min, args.p_max, args.output_dir)
    for h, d in zip(rows[0::2], rows[1::2]):
        print(f"p={h['p']}: nnz DG/HDG = {d['nnz'] / h['nnz']:.3f}, "
              f"t DG/HDG = {d['t_solve'] / h['t_solve']:.3f}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
