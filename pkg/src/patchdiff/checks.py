"""Property checks bundled for ``patchdiff verify``."""

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .cell_solver import diffusivity_record, solve_cell
from .fd_assembly import assemble_T, cell_rhs
from .patch_field import (Grid2D, PatchParams, assemble_A, dihedral_group,
                          verify_cone_lemma, verify_isometry_symmetry)
from .spde import build_patch_vectors, drift_energy, noise_energy

log = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _timed(name, fn):
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failed check
        log.exception("check %s raised", name)
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


def check_operator(n=128, c=1.0, kappa=0.01):
    T = assemble_T(assemble_A(Grid2D(n), PatchParams(c)), kappa).matrix
    asym = abs(T - T.T).max()
    kernel = np.abs(T @ np.ones(T.shape[0])).max() / T.diagonal().max()
    rng = np.random.default_rng(0)
    U = rng.standard_normal((T.shape[0], 50))
    psd = float(np.min(np.einsum("ij,ij->j", U, T @ U) / np.einsum("ij,ij->j", U, U)))
    ok = asym == 0 and kernel <= 1e-12 and psd >= -1e-10
    return ok, f"max|T-T^T|={asym:.1e} |T1|/maxdiag={kernel:.1e} min Rayleigh={psd:.3e}"


def check_isometries(n=128, c_list=(0.4, 1.0, 1.4)):
    worst = 0.0
    for c in c_list:
        A = assemble_A(Grid2D(n), PatchParams(c))
        worst = max(worst, max(verify_isometry_symmetry(A, R) for R in dihedral_group()))
    return worst <= 1e-12, f"max deviation {worst:.2e} over 8 isometries, c in {list(c_list)}"


def check_cone(n_x=128, n_angle=360):
    holds, margin = verify_cone_lemma(n_x, n_angle)
    return holds, f"worst margin {margin:.4f} ({n_x}^2 points x {n_angle} directions)"


def check_covariance(n=128, N=4, c=1.0):
    g = Grid2D(n)
    ps = build_patch_vectors(N, g, PatchParams(c), mode="sampled")
    A = assemble_A(g, PatchParams(c), N)
    dev = max(np.abs(ps.A_N.a11 - A.a11).max(), np.abs(ps.A_N.a12 - A.a12).max(),
              np.abs(ps.A_N.a22 - A.a22).max()) / A.max_abs()
    return dev <= 1e-13, f"relative deviation {dev:.1e}"


def check_cancellation(n=64, N=4, c=1.0, fields=20):
    ps = build_patch_vectors(N, Grid2D(n), PatchParams(c))
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(fields):
        u = rng.standard_normal((n, n))
        a, b = noise_energy(u, ps), drift_energy(u, ps)
        worst = max(worst, abs(a - b) / abs(b))
    return worst <= 1e-12, f"max relative gap {worst:.1e} over {fields} random fields"


def check_lower_bound(n=64, c_list=(0.3, 1.0), kappa=1e-3):
    worst = math.inf
    for c in c_list:
        rec = diffusivity_record(assemble_A(Grid2D(n), PatchParams(c)), kappa, c=c)
        worst = min(worst, rec.C_flux / kappa)
    return worst >= 1.0 - 1e-6, f"min C/kappa = {worst:.4f}"


def check_dense_solve(n=32, c=1.0, kappa=0.01):
    A = assemble_A(Grid2D(n), PatchParams(c))
    T = assemble_T(A, kappa)
    b = cell_rhs(A, 1)
    x, _ = solve_cell(T, b, precond="none")
    dense = np.linalg.lstsq(T.matrix.toarray(), b.ravel(), rcond=None)[0]
    dense -= dense.mean()
    err = np.abs(x.ravel() - dense).max() / np.abs(dense).max()
    return err <= 1e-8, f"CG vs dense pseudo-inverse: {err:.1e}"


def run_checks(fast=False):
    n = 64 if fast else 128
    checks = [
        ("operator symmetry/kernel/psd", lambda: check_operator(n)),
        ("isometry symmetry of A", lambda: check_isometries(n)),
        ("cone lemma brute force", lambda: check_cone(64 if fast else 128, 180 if fast else 360)),
        ("covariance identity sum sigma sigma = A^N", lambda: check_covariance(n)),
        ("noise/drift energy cancellation", lambda: check_cancellation()),
        ("lower bound C >= kappa", lambda: check_lower_bound()),
        ("CG against dense solve", lambda: check_dense_solve()),
    ]
    return [_timed(name, fn) for name, fn in checks]
