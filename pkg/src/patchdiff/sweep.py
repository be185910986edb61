"""Parameter sweeps over (c, kappa, d) and d -> 0 extrapolation."""

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .cell_solver import DEFAULT_MAX_ITER, DEFAULT_TOL, DiffusivityRecord, diffusivity_record
from .errors import DataError, PatchDiffError, PreconditionError, SolverError
from .fd_assembly import assemble_T
from .patch_field import Grid2D, PatchParams, assemble_A

log = logging.getLogger(__name__)

DEFAULT_D_LIST = (1 / 100, 1 / 200, 1 / 400)
# quoted fine-grid steps (one coarse entry), selectable as an alternative plan
QUOTED_D_LIST = (0.0100, 0.00222, 0.00167, 0.00125)
# relative mismatch tolerated when rounding a quoted grid step to 1/n
D_ROUND_TOL = 5e-3


def default_kappa_list(count=21):
    return tuple(np.logspace(-4, -2, count))


def default_c_list():
    return tuple(round(0.2 + 0.1 * i, 10) for i in range(18))


def n_from_d(d):
    """Grid size for a step ``d``; quoted steps such as 0.00222 round to 1/450."""
    n = int(round(1.0 / d))
    if n < 8 or abs(1.0 / n - d) > D_ROUND_TOL * d:
        raise PreconditionError(f"grid step {d!r} is not close to 1/n for an integer n >= 8")
    if abs(1.0 / n - d) > 1e-12 * d:
        log.info("grid step %.6g rounded to 1/%d", d, n)
    return n


@dataclass
class SweepPlan:
    """Experimental design for a sweep."""

    c_list: tuple = field(default_factory=default_c_list)
    kappa_list: tuple = field(default_factory=default_kappa_list)
    d_list: tuple = DEFAULT_D_LIST
    a1: float = 0.05
    a2: float = 0.3
    lam: float = 1.0
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    precond: str = "auto"
    workers: int = 1

    def __post_init__(self):
        self.c_list = tuple(float(c) for c in self.c_list)
        self.kappa_list = tuple(float(k) for k in self.kappa_list)
        self.d_list = tuple(float(d) for d in self.d_list)
        if not (self.c_list and self.kappa_list and self.d_list):
            raise DataError("c_list, kappa_list and d_list must be nonempty")
        if any(k <= 0 for k in self.kappa_list):
            raise DataError("kappa_list must be strictly positive")
        if any(b >= a for a, b in zip(self.d_list, self.d_list[1:])):
            raise DataError("d_list must be strictly decreasing")
        if self.workers < 1:
            raise DataError("workers must be >= 1")
        for d in self.d_list:
            n_from_d(d)

    @property
    def n_list(self):
        return tuple(n_from_d(d) for d in self.d_list)

    def params(self, c):
        return PatchParams(c, self.a1, self.a2, self.lam)

    def to_dict(self):
        return asdict(self)


@dataclass
class ExtrapolatedPoint:
    """d -> 0 extrapolation of the diffusivity at one (c, kappa)."""

    c: float
    kappa: float
    C_extrap: float
    slope: float
    fit_residual: float
    records: list
    C_var_extrap: float = float("nan")
    H_extrap: np.ndarray = None

    @property
    def offdiag_ratio(self):
        if self.H_extrap is None:
            return float("nan")
        return float(abs(self.H_extrap[0, 1]) / self.C_extrap)

    @property
    def n_grids_used(self):
        return len(self.records)

    def row(self):
        return [self.c, self.kappa, self.C_extrap, self.slope, self.fit_residual, self.n_grids_used]

    CSV_COLUMNS = ("c", "kappa", "C_extrap", "slope", "residual", "n_grids_used")


def fit_d2(d, y):
    """Least-squares ``y = y0 + s d^2``; returns ``(y0, s, residual_norm)``."""
    d = np.asarray(d, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(np.unique(d)) < 2:
        raise DataError("extrapolation needs at least two distinct grid steps")
    X = np.column_stack([np.ones_like(d), d**2])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    res = float(np.linalg.norm(X @ coef - y))
    return float(coef[0]), float(coef[1]), res


def extrapolate_d(records):
    """Fit ``C(d) = C0 + s d^2`` over per-grid records of one (c, kappa)."""
    if not records:
        raise DataError("no records to extrapolate")
    keys = {(r.c, r.kappa) for r in records}
    if len(keys) != 1:
        raise DataError(f"records mix several (c, kappa) points: {sorted(keys)}")
    records = sorted(records, key=lambda r: -r.d)
    d = [r.d for r in records]
    C0, s, res = fit_d2(d, [r.C_flux for r in records])
    Cv0, _, _ = fit_d2(d, [r.C_var for r in records])
    H = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            H[i, j] = fit_d2(d, [r.Hbar[i, j] for r in records])[0]
    return ExtrapolatedPoint(records[0].c, records[0].kappa, C0, s, res, records, Cv0, H)


def run_point(c, kappa, d, params=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
              precond="auto", A=None):
    """Full pipeline at one (c, kappa, d): A -> T -> correctors -> record.

    ``params`` is a ``PatchParams`` (defaults from ``c``); ``A`` overrides the
    assembled field, e.g. with zeros.
    """
    n = n_from_d(d)
    p = params if params is not None else PatchParams(c)
    if A is None:
        A = assemble_A(Grid2D(n), p)
    try:
        T = assemble_T(A, kappa)
        return diffusivity_record(A, kappa, T=T, c=c, tol=tol, max_iter=max_iter,
                                  precond=precond,
                                  meta={"c": c, "kappa": kappa, "n": n, "a1": p.a1,
                                        "a2": p.a2, "lam": p.lam, "tol": tol})
    except SolverError as exc:
        exc.context.update(c=c, kappa=kappa, d=d)
        raise


def _record_key(plan, c, kappa, n):
    blob = json.dumps([c, kappa, n, plan.a1, plan.a2, plan.lam, plan.tol], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def _load_cached(cache_dir, key):
    if cache_dir is None:
        return None
    path = os.path.join(cache_dir, key + ".json")
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        return DiffusivityRecord.from_dict(json.load(fh))


def _store_cached(cache_dir, key, rec):
    if cache_dir is None:
        return
    path = os.path.join(cache_dir, key + ".json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(rec.to_dict(), fh)
    os.replace(tmp, path)


def _run_c(plan, c, cache_dir):
    """All kappa and grids for one radius; A is assembled once per grid."""
    params = plan.params(c)
    recs = {k: [] for k in plan.kappa_list}
    failures = {}
    times = {}
    for n in plan.n_list:
        A = None
        for kappa in plan.kappa_list:
            if kappa in failures:
                continue
            key = _record_key(plan, c, kappa, n)
            rec = _load_cached(cache_dir, key)
            if rec is None:
                if A is None:
                    A = assemble_A(Grid2D(n), params)
                t0 = time.perf_counter()
                try:
                    rec = run_point(c, kappa, 1.0 / n, params, plan.tol, plan.max_iter,
                                    plan.precond, A=A)
                except (PatchDiffError, np.linalg.LinAlgError, MemoryError) as exc:
                    log.error("point c=%g kappa=%g n=%d failed: %s", c, kappa, n, exc)
                    failures[kappa] = f"n={n}: {type(exc).__name__}: {exc}"
                    continue
                times[(kappa, n)] = time.perf_counter() - t0
                _store_cached(cache_dir, key, rec)
            recs[kappa].append(rec)
    points = []
    for kappa in plan.kappa_list:
        if kappa in failures:
            continue
        try:
            points.append(extrapolate_d(recs[kappa]))
        except DataError as exc:
            failures[kappa] = str(exc)
    return c, points, failures, times


@dataclass
class SweepResult:
    points: list
    failures: list
    wall_time: float
    point_times: dict


def run_sweep(plan, cache_dir=None):
    """Run every (c, kappa) point of ``plan``.

    Radii are distributed over at most ``plan.workers`` processes. A failing
    point is recorded in ``failures`` and never aborts the sweep; only a sweep
    where every point fails raises.
    """
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
    t0 = time.perf_counter()
    if plan.workers == 1:
        outs = [_run_c(plan, c, cache_dir) for c in plan.c_list]
    else:
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            outs = list(pool.map(_run_c, [plan] * len(plan.c_list), plan.c_list,
                                 [cache_dir] * len(plan.c_list)))
    points, failures, point_times = [], [], {}
    for c, pts, fails, times in outs:
        points.extend(pts)
        failures.extend({"c": c, "kappa": k, "error": msg} for k, msg in sorted(fails.items()))
        point_times.update({(c, k, n): t for (k, n), t in times.items()})
    points.sort(key=lambda p: (p.c, p.kappa))
    if not points:
        raise SolverError(f"every sweep point failed ({len(failures)} failures)")
    for c in plan.c_list:
        C = [p.C_extrap for p in points if p.c == c]
        if any(b < a for a, b in zip(C, C[1:])):
            log.info("C_extrap not monotone in kappa at c=%g", c)
    return SweepResult(points, failures, time.perf_counter() - t0, point_times)

