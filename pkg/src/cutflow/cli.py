"""Command line interface.

Subcommands: analyze, optimize, gradcheck, sweep. Exit codes: 0 success,
2 configuration error, 3 nonconvergence, 4 output/I-O error. Assembly is
strictly ordered (sequential) by construction, so --strict-order is
accepted for compatibility and --threads only affects the BLAS backend.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import parse_config
from .driver import run_analysis, run_gradcheck, run_optimization, run_sweep
from .errors import ConfigurationError, NonconvergenceError, OutputError


def _common(sub):
    sub.add_argument("--config", required=True, help="run configuration file")
    sub.add_argument("--output", default=None, help="output directory")
    sub.add_argument("--threads", type=int, default=None,
                     help="BLAS thread count (assembly itself is sequential)")
    sub.add_argument("--strict-order", action="store_true",
                     help="force strictly ordered assembly (always on)")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="cutflow",
        description="CutFEM topology optimization for laminar flow problems",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    a = subs.add_parser("analyze", help="solve one geometry and report criteria")
    _common(a)

    o = subs.add_parser("optimize", help="run the GCMMA optimization loop")
    _common(o)
    o.add_argument("--restart", default=None, help="checkpoint file to resume from")

    g = subs.add_parser("gradcheck", help="adjoint gradients vs finite differences")
    _common(g)
    g.add_argument("--vars", type=int, default=5, help="number of design variables")
    g.add_argument("--step", type=float, default=1e-5, help="FD step size")

    s = subs.add_parser("sweep", help="parameter sweep of repeated analyses")
    _common(s)
    s.add_argument("--parameter", required=True,
                   choices=("k_pressure", "alpha_nitsche"))
    s.add_argument("--values", required=True,
                   help="comma-separated parameter values")

    args = parser.parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
        try:  # cap already-loaded BLAS pools too
            import threadpoolctl
            threadpoolctl.threadpool_limits(args.threads)
        except ImportError:
            pass

    try:
        cfg = parse_config(args.config)
        if args.command == "analyze":
            summary = run_analysis(cfg, outdir=args.output)
            for k, v in summary["criteria"].items():
                print(f"{k} = {v!r}")
        elif args.command == "optimize":
            summary = run_optimization(cfg, outdir=args.output, restart=args.restart)
            print(f"iterations = {summary['iterations']}")
            print(f"objective = {summary['objective']!r}")
            print(f"feasible = {summary['feasible']}")
            print(f"converged = {summary['converged']}")
        elif args.command == "gradcheck":
            rows = run_gradcheck(cfg, outdir=args.output, n_vars=args.vars,
                                 step=args.step)
            worst = max(r[3] for r in rows)
            for idx, an, fd, rel in rows:
                print(f"s[{idx}]: adjoint={an!r} fd={fd!r} rel={rel:.3e}")
            print(f"worst rel error = {worst:.3e}")
        elif args.command == "sweep":
            values = [float(v) for v in args.values.split(",")]
            run_sweep(cfg, args.parameter, values, outdir=args.output)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NonconvergenceError as exc:
        print(f"nonconvergence: {exc}", file=sys.stderr)
        if args.output:
            try:
                os.makedirs(args.output, exist_ok=True)
                with open(os.path.join(args.output, "diagnostic.txt"), "w") as f:
                    f.write(f"{exc}\ntrace = {exc.trace!r}\nstep = {exc.step!r}\n")
            except OSError:
                pass
        return 3
    except OutputError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
