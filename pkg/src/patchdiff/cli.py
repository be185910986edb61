"""Command-line entry point ``patchdiff``.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 a verification
check failed.
"""

import argparse
import logging
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import PatchDiffError, UsageError
from .outputs import Series, Table, emit_outputs, parse_config, read_table

log = logging.getLogger("patchdiff")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_VERIFY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="patchdiff", description="Effective diffusivity of vortex-patch transport noise")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--overwrite", action="store_const", const=True, default=None)
        sp.add_argument("--seed", type=int)

    def patch(sp):
        sp.add_argument("--c", type=float)
        sp.add_argument("--a1", type=float)
        sp.add_argument("--a2", type=float)
        sp.add_argument("--lambda", dest="lambda_", type=float)

    s = sub.add_parser("solve", help="cell problems at one (c, kappa, n)")
    common(s)
    patch(s)
    s.add_argument("--kappa", type=float)
    s.add_argument("--n", type=int)
    s.add_argument("--tol", type=float)
    s.add_argument("--precond")
    s.add_argument("--eig", action="store_true", help="also compute the principal eigenvalue")

    s = sub.add_parser("sweep", help="(c, kappa, d) sweep with d -> 0 extrapolation")
    common(s)
    s.add_argument("--plan", dest="config_plan", help="plan file (INI, same schema as --config)")
    s.add_argument("--workers", type=int)
    s.add_argument("--cache", help="directory for per-record cache files")

    s = sub.add_parser("fit", help="power-law fits of a sweep CSV")
    common(s)
    s.add_argument("--input")
    s.add_argument("--kappa-star", dest="kappa_star", nargs="+", type=float)
    s.add_argument("--drop", type=float)
    s.add_argument("--resamples", type=int)

    s = sub.add_parser("simulate", help="Monte Carlo SPDE ensemble")
    common(s)
    patch(s)
    s.add_argument("--kappa", type=float)
    s.add_argument("--N", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--paths", type=int)
    s.add_argument("--dt", type=float)
    s.add_argument("--t-end", dest="t_end", type=float)
    s.add_argument("--records", type=int)
    s.add_argument("--mode", choices=("stream", "sampled"))

    s = sub.add_parser("verify", help="run the property checks")
    common(s)
    s.add_argument("--fast", action="store_const", const=True, default=None)
    return p


def _flags(ns):
    skip = {"subcommand", "config", "config_plan", "verbose", "eig", "cache"}
    out = {}
    for key, val in vars(ns).items():
        if key in skip:
            continue
        out["lambda" if key == "lambda_" else key] = val
    return out


def _out_dir(cfg, name):
    return cfg.get("out") or os.path.join("results", f"{name}-{time.strftime('%Y%m%d-%H%M%S')}")


def _patch_params(cfg, c=None):
    from .patch_field import PatchParams

    return PatchParams(cfg["c"] if c is None else c, cfg["a1"], cfg["a2"], cfg["lambda"])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_solve(cfg, ns):
    from .cell_solver import DiffusivityRecord, principal_eigenvalue
    from .fd_assembly import assemble_T
    from .patch_field import Grid2D, assemble_A
    from .sweep import run_point

    p = _patch_params(cfg)
    n = cfg["n"]
    A = assemble_A(Grid2D(n), p)
    rec = run_point(p.c, cfg["kappa"], 1.0 / n, p, cfg["tol"], cfg["max_iter"], cfg["precond"], A=A)
    extra = {"record": rec.to_dict()}
    if ns.eig:
        lam = principal_eigenvalue(assemble_T(A, cfg["kappa"]))
        extra["principal_eigenvalue"] = lam
        extra["eig_over_4pi2"] = lam / (4 * math.pi**2)
    print(f"c={p.c} kappa={cfg['kappa']} n={n}: C_flux={rec.C_flux:.10g} "
          f"C_var={rec.C_var:.10g} H12/C={rec.offdiag_ratio:.2e}")
    emit_outputs({"record.csv": Table(DiffusivityRecord.CSV_COLUMNS, [rec.row()])},
                 _out_dir(cfg, "solve"), cfg, cfg["overwrite"], extra)
    return EXIT_OK


def sweep_tables(result):
    """Sweep CSV, per-grid record CSV and per-c plot series from a ``SweepResult``."""
    from .cell_solver import DiffusivityRecord
    from .sweep import ExtrapolatedPoint

    out = {"sweep.csv": Table(ExtrapolatedPoint.CSV_COLUMNS, [p.row() for p in result.points])}
    recs = sorted((r for p in result.points for r in p.records), key=lambda r: (r.c, r.kappa, -r.d))
    out["records.csv"] = Table(DiffusivityRecord.CSV_COLUMNS, [r.row() for r in recs])
    for c in sorted({p.c for p in result.points}):
        pts = [p for p in result.points if p.c == c]
        out[f"additional_diffusivity_c{c:g}.dat"] = Series(
            [p.kappa for p in pts], [p.C_extrap - p.kappa for p in pts],
            f"kappa  C_extrap-kappa  (c={c:g})")
    return out


def cmd_sweep(cfg, ns):
    from .sweep import SweepPlan, default_c_list, default_kappa_list, run_sweep

    plan = SweepPlan(c_list=cfg.get("c_list", default_c_list()),
                     kappa_list=cfg.get("kappa_list", default_kappa_list()),
                     d_list=cfg["d_list"], a1=cfg["a1"], a2=cfg["a2"], lam=cfg["lambda"],
                     tol=cfg["tol"], max_iter=cfg["max_iter"], precond=cfg["precond"],
                     workers=cfg["workers"])
    out_dir = _out_dir(cfg, "sweep")
    if os.path.exists(os.path.join(out_dir, "manifest.json")) and not cfg["overwrite"]:
        raise FileExistsError(f"{out_dir} already contains results; pass --overwrite")
    result = run_sweep(plan, cache_dir=ns.cache)
    emit_outputs(sweep_tables(result), out_dir, cfg, True,
                 {"plan": plan.to_dict(), "failures": result.failures,
                  "wall_time_s": result.wall_time})
    print(f"{len(result.points)} points, {len(result.failures)} failures, "
          f"{result.wall_time:.1f} s -> {out_dir}")
    return EXIT_OK


def load_sweep_points(path):
    """``{c: array of (kappa, nu)}`` from a sweep CSV, with ``nu = C_extrap - kappa``."""
    _, rows = read_table(path)
    by_c = {}
    for r in rows:
        by_c.setdefault(r["c"], []).append((r["kappa"], r["C_extrap"] - r["kappa"]))
    return {c: np.array(sorted(v)) for c, v in sorted(by_c.items())}


def cmd_fit(cfg, ns):
    from .powerlaw import FitResult, stability_scan

    data = load_sweep_points(cfg["input"])
    rows, cs, qs, ns_ = [], [], [], []
    for c, pts in data.items():
        scan = stability_scan(pts, cfg["kappa_star"], cfg["drop"], cfg["resamples"], cfg["seed"])
        last = None
        for e in scan:
            if e.result is None:
                log.warning("c=%g kappa*=%g: %s", c, e.kappa_star, e.error)
                continue
            rows.append([c] + e.result.row())
            last = e
        if last is not None:
            cs.append(c)
            qs.append(last.extra.get("q_jack", last.result.q))
            ns_.append(last.extra.get("n_jack", last.result.n))
    results = {"fit.csv": Table(("c",) + FitResult.CSV_COLUMNS, rows)}
    if cs:
        results["intercept_vs_c.dat"] = Series(cs, qs, "c  q")
        results["exponent_vs_c.dat"] = Series(cs, ns_, "c  n")
    emit_outputs(results, _out_dir(cfg, "fit"), cfg, cfg["overwrite"])
    print(f"fitted {len(cs)} radii, {len(rows)} windows")
    return EXIT_OK


def cmd_simulate(cfg, ns):
    from .patch_field import Grid2D
    from .spde import HomogenizedCoefficient, NoiseConfig, compare_homogenized, simulate
    from .sweep import extrapolate_d, run_point

    p = _patch_params(cfg)
    kappa = cfg["kappa"]
    conf = NoiseConfig(N=cfg["N"], seed=cfg["seed"], dt=cfg["dt"], paths=cfg["paths"],
                       kappa=kappa, params=p, n=cfg["n"], mode=cfg["mode"])
    point = extrapolate_d([run_point(p.c, kappa, d, p) for d in (1 / 100, 1 / 200, 1 / 400)])
    C_eff = HomogenizedCoefficient.from_point(point)
    T_end = cfg["t_end"] or math.log(10.0) / (4 * math.pi**2 * C_eff.C)
    x1, _ = Grid2D(conf.n).coords()
    u0 = np.cos(2 * np.pi * x1)
    ens = simulate(u0, T_end, conf, [u0], n_records=cfg["records"])
    t, err = compare_homogenized(ens, C_eff, u0, u0)
    mean, var, energy = ens.mean_observable()[0], ens.var_observable()[0], ens.mean_energy()
    rows = [[t[i], mean[i], var[i], energy[i], err[i]] for i in range(t.size)]
    emit_outputs({"ensemble.csv": Table(("time", "mean_obs", "var_obs", "mean_energy",
                                         "err_vs_homogenized"), rows)},
                 _out_dir(cfg, "simulate"), cfg, cfg["overwrite"],
                 {"noise": conf.manifest(), "C_eff": C_eff.C, "dt_used": ens.dt,
                  "steps": ens.steps, "T_end": T_end})
    print(f"N={conf.N} paths={conf.paths} steps={ens.steps}: sup error {err.max():.3e}")
    return EXIT_OK


def cmd_verify(cfg, ns):
    from .checks import run_checks

    results = run_checks(fast=bool(cfg["fast"]))
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
    if cfg.get("out"):
        emit_outputs({"verify.csv": Table(("check", "passed", "detail"),
                                          [[r.name, r.passed, r.detail] for r in results])},
                     cfg["out"], cfg, cfg["overwrite"])
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {"solve": cmd_solve, "sweep": cmd_sweep, "fit": cmd_fit,
            "simulate": cmd_simulate, "verify": cmd_verify}


def main(argv=None):
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(ns.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        cfg_file = getattr(ns, "config_plan", None) or ns.config
        cfg = parse_config(ns.subcommand, cfg_file, _flags(ns))
        return COMMANDS[ns.subcommand](cfg, ns)
    except (UsageError, FileExistsError) as exc:
        print(f"patchdiff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PatchDiffError, ArithmeticError, np.linalg.LinAlgError, OSError) as exc:
        print(f"patchdiff: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
