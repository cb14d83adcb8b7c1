"""Command line: run, sweep, convergence, check, mesh-info.

Exit status 0 on success, 1 on usage errors, 2 on numerical failures.
"""
import argparse
import json
import logging
from pathlib import Path
import sys

import numpy as np

from ..diagnostics import DiagnosticsRecorder, check_entropy_inequality
from ..linsolve import LinearSolveError
from ..scheme import FixedPointError, StepError, run
from .cases import builtin_case, case_names
from .io import ConfigError, DiagnosticsCSV, RunConfig, SnapshotWriter, read_config, write_snapshot
from .study import (DESK_REF_CELLS, DESK_REF_DT, effective_lambda2, fit_order, make_params, sweep)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    p = _Parser(prog="driftfv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    r = sub.add_parser("run", help="single simulation")
    r.add_argument("--config", help="key = value config file")
    r.add_argument("--case", choices=case_names())
    r.add_argument("--lambda2", type=float)
    r.add_argument("--dt", type=float)
    r.add_argument("--t-final", type=float)
    r.add_argument("--cells", type=int, help="1D cells, or cells per side in 2D")
    r.add_argument("--mesh-file")
    r.add_argument("--mu")
    r.add_argument("--fp-tol", type=float)
    r.add_argument("--fp-max-iter", type=int)
    r.add_argument("--solver", choices=["gummel", "relaxation"])
    r.add_argument("--out-dir")
    r.add_argument("--snapshot-every", type=int, help="also write a snapshot every k steps")

    def sweep_args(s):
        s.add_argument("--case", choices=case_names(), default="case1")
        s.add_argument("--lambda2", "--lambda2s", dest="lambda2s", type=_floats, default=[1.0])
        s.add_argument("--dts", type=_floats, default=[1e-2, 5e-3, 2.5e-3, 1.25e-3])
        s.add_argument("--cells", type=_ints, default=[DESK_REF_CELLS])
        s.add_argument("--ref-cells", type=int, default=DESK_REF_CELLS)
        s.add_argument("--ref-dt", type=float, default=DESK_REF_DT)
        s.add_argument("--paper-scale", action="store_true", help="10240-cell / 1e-6 references")
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--out", default="errors.csv")

    sw = sub.add_parser("sweep", help="error table over lambda^2, dt, cells")
    sweep_args(sw)
    cv = sub.add_parser("convergence", help="sweep plus fitted orders")
    sweep_args(cv)
    cv.add_argument("--along", choices=["dt", "dx"], default="dt")

    ck = sub.add_parser("check", help="flux, M-matrix and entropy self-checks")
    ck.add_argument("--samples", type=int, default=100000)
    ck.add_argument("--seed", type=int, default=0)

    mi = sub.add_parser("mesh-info", help="mesh admissibility report")
    mi.add_argument("--case", choices=case_names(), default="case1")
    mi.add_argument("--cells", type=int, default=20)
    mi.add_argument("--mesh-file")
    return p


def _run_config(args):
    cfg = read_config(args.config) if args.config else RunConfig()
    for key in ("case", "lambda2", "dt", "t_final", "cells", "mesh_file", "mu", "fp_tol",
                "fp_max_iter", "solver", "out_dir", "snapshot_every"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    return cfg


def cmd_run(args):
    cfg = _run_config(args)
    case = builtin_case(cfg.case)
    mesh = case.mesh(cfg.cells, cfg.mesh_file)
    data = case.problem(mesh)
    lam = effective_lambda2(case, cfg.lambda2, data)
    if lam != cfg.lambda2:
        print(f"note: lambda2=0 is undefined with doping; running lambda2={lam:g}")
    params = make_params(case, lam, cfg.dt, cfg.t_final, mu=cfg.mu_value, fp_tol=cfg.fp_tol,
                         fp_max_iter=cfg.fp_max_iter, solver=cfg.solver)
    out = Path(cfg.out_dir)
    rec = DiagnosticsRecorder(mesh, data, params)
    observers = [DiagnosticsCSV(out / "diagnostics.csv", rec)]
    if cfg.snapshot_every:
        observers.append(SnapshotWriter(out, mesh, lam, cfg.snapshot_every))
    res = run(mesh, data, params, observers)
    write_snapshot(out / "state_final.txt", mesh, res.state, lam)
    chk = check_entropy_inequality(rec.records, params.dt, lam)
    summary = {
        "case": case.name, "cells": mesh.n_cells, "lambda2": lam, "dt": params.dt,
        "steps": res.n_steps, "t": res.state.t, "fp_iters_avg": res.fp_iters_avg,
        "min_N": min(r.min_N for r in rec.records), "max_N": max(r.max_N for r in rec.records),
        "min_P": min(r.min_P for r in rec.records), "max_P": max(r.max_P for r in rec.records),
        "entropy_inequality": chk.ok, "entropy_worst_margin": chk.worst_margin,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _sweep(args):
    return sweep(args.case, args.lambda2s, args.dts, args.cells, args.ref_cells, args.ref_dt,
                 paper_scale=args.paper_scale, workers=args.workers)


def cmd_sweep(args):
    table = _sweep(args)
    table.to_csv(args.out)
    print(f"wrote {len(table.rows)} rows to {args.out}")
    failed = [r for r in table.rows if r.failed]
    for r in failed:
        print(f"row lambda2={r.lambda2:g} dt={r.dt:g} dx={r.dx:g} failed: {r.failure}", file=sys.stderr)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_convergence(args):
    table = _sweep(args)
    table.to_csv(args.out)
    slopes = fit_order(table, along=args.along)
    print(f"fitted orders along {args.along}:")
    for lam, s in slopes.items():
        print(f"  lambda2={lam:<8g} N={s['N']:.3f} P={s['P']:.3f} Psi={s['Psi']:.3f}")
    return EXIT_OK


def cmd_check(args):
    from ..flux import bernoulli, check_flux_inequalities
    from ..linsolve import assemble_linearized_density, check_m_matrix
    from ..mesh import build_1d_uniform

    rng = np.random.default_rng(args.seed)
    ok = True
    x = rng.uniform(-50, 50, args.samples)
    ident = np.abs(bernoulli(x) - bernoulli(-x) + x) <= 1e-13 * np.maximum(1.0, np.abs(x))
    print(f"Bernoulli identity B(x) - B(-x) = -x: {'ok' if ident.all() else 'FAIL'}")
    ok &= bool(ident.all())
    n = args.samples
    inp = (np.ones(n), rng.uniform(-20, 20, n), rng.uniform(0.1, 0.9, n), rng.uniform(0.1, 0.9, n))
    for species in ("electron", "hole"):
        rep = check_flux_inequalities(inp, species)
        print(f"flux inequalities ({species}): {'ok' if rep.ok else 'FAIL'}")
        ok &= rep.ok
    mesh = build_1d_uniform(50)
    mm = True
    for _ in range(100):
        psi = np.concatenate([rng.normal(0, 5, mesh.n_cells), rng.normal(0, 5, mesh.n_dirichlet)])
        for sp_name in ("electron", "hole"):
            sys_ = assemble_linearized_density(mesh, sp_name, psi, 10 ** rng.uniform(-5, -1),
                                               np.ones(mesh.n_cells), np.ones(mesh.n_dirichlet))
            mm &= check_m_matrix(sys_).strictly_dominant
    print(f"density matrices are M-matrices: {'ok' if mm else 'FAIL'}")
    ok &= mm
    case = builtin_case("case1")
    mesh = case.mesh(40)
    data = case.problem(mesh)
    for lam in (1.0, 0.0):
        params = make_params(case, lam, 1e-3, t_final=0.02)
        rec = DiagnosticsRecorder(mesh, data, params)
        run(mesh, data, params, [rec])
        rep = check_entropy_inequality(rec.records, params.dt, lam)
        print(f"entropy inequality (case1, lambda2={lam:g}): {'ok' if rep.ok else 'FAIL'}")
        ok &= rep.ok
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_mesh_info(args):
    case = builtin_case(args.case)
    mesh = case.mesh(args.cells, args.mesh_file)
    for k, v in mesh.describe().items():
        print(f"{k}: {v}")
    admissible = mesh.xi > 0 and mesh.orthogonality_residual() <= 1e-10
    print(f"admissible: {'yes' if admissible else 'no'}")
    return EXIT_OK if admissible else EXIT_NUMERIC


_COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "convergence": cmd_convergence,
             "check": cmd_check, "mesh-info": cmd_mesh_info}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:          # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StepError, FixedPointError, LinearSolveError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
