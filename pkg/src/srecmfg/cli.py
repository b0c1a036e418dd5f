"""Command line entry point: ``srecmfg solve|simulate|audit|report``.

Exit codes: 0 success, 2 configuration error, 3 non-convergence or
refusal, 4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from .config import OUT_DIR_ENV, load_config
from .errors import ConfigError, NonConvergenceError, SrecError

log = logging.getLogger("srecmfg")


def parse_seeds(text: str) -> list:
    """``"1..20"``, ``"3"`` or ``"1,4,9"`` (ranges may be mixed in)."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise argparse.ArgumentTypeError(f"empty seed range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    if not out or any(s < 0 for s in out):
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}")
    return out


def parse_agents(text: str) -> list:
    try:
        Ns = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad agent list {text!r}") from None
    if not Ns or any(n < 1 for n in Ns):
        raise argparse.ArgumentTypeError(f"bad agent list {text!r}")
    return Ns


def _out_dir(args, cfg):
    return args.out or os.environ.get(OUT_DIR_ENV) or cfg.run.out_dir


def cmd_solve(args):
    from .io import emit_failure, emit_solution, update_manifest
    from .solver import solve_fixed_point

    cfg = load_config(args.config)
    if args.omega is not None:
        cfg = cfg.with_(scheme__omega=args.omega).validate()
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    try:
        sol = solve_fixed_point(cfg, workers=args.workers)
    except NonConvergenceError as exc:
        sums = emit_failure(cfg, exc.residuals, out, str(exc), exc.suggested_omega)
        update_manifest(out, cfg, "solve", sums, time.perf_counter() - t0,
                        {"converged": False, "residuals": list(exc.residuals)})
        raise
    sums = emit_solution(sol, out, with_z=args.with_z)
    update_manifest(out, cfg, "solve", sums, time.perf_counter() - t0,
                    {"converged": True, "iterations": sol.iterations, "residuals": list(sol.residuals),
                     "defaults_applied": list(cfg.defaults_applied)})
    p = sol.compliance_probability()
    print(f"converged in {sol.iterations} iterations (residual {sol.final_residual:.3e})")
    print(f"price: mean {sol.price.mean():.5f}, range [{sol.price.min():.5f}, {sol.price.max():.5f}]")
    print("compliance probability: " + ", ".join(f"k{k + 1} {v:.4f}" for k, v in enumerate(p)))
    print(f"wrote {len(sums)} files to {out}")
    return 0


def cmd_simulate(args):
    from .io import emit_simulation, load_solution, update_manifest
    from .simulate import simulate

    cfg = load_config(args.config)
    sol = load_solution(args.solution, cfg)
    out = args.out or args.solution
    N = args.agents or cfg.run.n_agents
    seeds = args.seeds or [cfg.run.seed]
    t0 = time.perf_counter()
    runs = [simulate(sol, N, s, batch_size=args.batch_size, workers=args.workers) for s in seeds]
    sums = emit_simulation(runs, sol, out)
    update_manifest(out, cfg, "simulate", sums, time.perf_counter() - t0, {"N": N, "seeds": seeds})
    import numpy as np

    nonc = np.mean([r.noncompliance for r in runs], axis=0)
    print(f"N={N}, {len(seeds)} seed(s): non-compliance " + ", ".join(f"k{k + 1} {v:.4f}" for k, v in enumerate(nonc)))
    print(f"max clearing residual {max(r.clearing_residual for r in runs):.2e}")
    return 0


def cmd_audit(args):
    from .audit import audit
    from .io import emit_audit, load_solution, update_manifest

    cfg = load_config(args.config)
    sol = load_solution(args.solution, cfg)
    out = args.out or args.solution
    t0 = time.perf_counter()
    classes = None if args.cls is None else [args.cls - 1]
    rep = audit(sol, args.agents, args.seeds, classes=classes, workers=args.workers)
    sums = emit_audit(rep, out)
    update_manifest(out, cfg, "audit", sums, time.perf_counter() - t0, {"N": args.agents, "seeds": args.seeds})
    print(rep.label)
    for k, est in rep.gains.items():
        for e in est:
            print(f"  k{k + 1} N={e.N:5d}: gain {e.gain:.3e} +- {e.se:.1e}; "
                  f"best non-zero deviation {e.nonzero_gain:+.3e} ({e.nonzero_best})")
    for lab, c in rep.checks.items():
        print(f"  {lab}: " + ", ".join(f"{k}={v}" for k, v in c.items()))
    return 0


def cmd_report(args):
    from .io import load_solution, update_manifest
    from .report import build_report

    sol = load_solution(args.dir)
    out = args.out or os.path.join(args.dir, "report")
    t0 = time.perf_counter()
    sums = build_report(sol, args.dir, out, figures=not args.no_figures)
    update_manifest(out, sol.config, "report", sums, time.perf_counter() - t0)
    print(f"wrote {len(sums)} files to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srecmfg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="log progress (repeat for debug)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="compute the mean-field equilibrium")
    s.add_argument("config")
    s.add_argument("--out", help=f"output directory (default: ${OUT_DIR_ENV} or run.out_dir)")
    s.add_argument("--omega", type=float, help="override the damping weight")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--with-z", action="store_true", help="also write the z.csv martingale-integrand diagnostic")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("simulate", help="replay the finite-player market")
    s.add_argument("config")
    s.add_argument("--solution", required=True, help="directory written by solve")
    s.add_argument("--seeds", type=parse_seeds, help="e.g. 1..20 (default: run.seed)")
    s.add_argument("--agents", type=int, help="number of firms (default: run.n_agents)")
    s.add_argument("--out", help="output directory (default: the solution directory)")
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("audit", help="estimate deviation gains across population sizes")
    s.add_argument("config")
    s.add_argument("--solution", required=True)
    s.add_argument("--agents", type=parse_agents, default=[50, 200, 800, 2000])
    s.add_argument("--seeds", type=parse_seeds, default=list(range(1, 21)))
    s.add_argument("--class", dest="cls", type=int, help="audit one class only (1-based)")
    s.add_argument("--out")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("report", help="plot-ready tables and figures")
    s.add_argument("dir", help="directory holding solve (and optionally simulate) output")
    s.add_argument("--out", help="default: <dir>/report")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for p in exc.problems:
            print(f"  - {p}", file=sys.stderr)
        return exc.exit_code
    except NonConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.suggested_omega is not None:
            print(f"residuals oscillated; try --omega {exc.suggested_omega:g}", file=sys.stderr)
        return exc.exit_code
    except SrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
