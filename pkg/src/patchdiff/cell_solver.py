"""Cell problems, homogenised matrix and principal eigenvalue.

The two correctors solve ``T phi_i = div(A e_i)`` on the mean-zero subspace.
The effective matrix is read off from the averaged corrected flux and,
independently, from the corrector energy.
"""

import csv
import json
import logging
import platform
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DataError, DomainError, SolverError
from .fd_assembly import apply_diff, cell_rhs, centered_gradient

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 20000
DIAG_TOL = 1e-3
CROSS_TOL = 1e-2
# |mean(rhs)| allowed relative to max|rhs| before the system is declared incompatible
COMPAT_TOL = 1e-8
LU_MAX_N = 512


def _amg_preconditioner(matrix):
    import pyamg

    ml = pyamg.smoothed_aggregation_solver(
        matrix, B=np.ones((matrix.shape[0], 1)), symmetry="symmetric",
        strength="symmetric", max_coarse=50)
    return ml.aspreconditioner(cycle="V")


def _jacobi_preconditioner(matrix):
    diag = matrix.diagonal().copy()
    diag[diag <= 0] = 1.0
    inv = 1.0 / diag
    return spla.LinearOperator(matrix.shape, matvec=lambda r: inv * r)


class _PinnedLU:
    """Exact generalized inverse of ``T`` on mean-zero vectors.

    Fixing the value at node 0 removes the constant kernel; the remaining
    block is SPD and factorised once. For compatible ``r`` the returned ``x``
    satisfies ``T x = r`` exactly (row 0 follows from the zero column sums).
    """

    def __init__(self, matrix):
        self.lu = spla.splu(matrix[1:, 1:].tocsc(), permc_spec="MMD_AT_PLUS_A",
                             options={"SymmetricMode": True})
        self.shape = matrix.shape

    def __matmul__(self, r):
        x = np.zeros(self.shape[0])
        x[1:] = self.lu.solve(r[1:])
        return x


def make_preconditioner(T, kind="auto"):
    """Return a preconditioner ``M ~ T^+`` as a callable, or ``None``.

    ``"auto"`` picks the pinned sparse LU up to ``n = LU_MAX_N`` (it turns CG
    into a one- or two-step residual-verified solve) and AMG above, where the
    factor no longer fits comfortably in memory.
    """
    if kind is None or kind == "none":
        return None
    if kind == "auto":
        kind = "lu" if T.n <= LU_MAX_N else "amg"
    if kind == "lu":
        return _PinnedLU(T.matrix)
    if kind == "amg":
        return _amg_preconditioner(T.matrix)
    if kind == "jacobi":
        return _jacobi_preconditioner(T.matrix)
    raise ValueError(f"unknown preconditioner {kind!r}")


def _project(v):
    return v - v.mean()


def solve_cell(T, rhs, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, precond="auto"):
    """Solve ``T u = rhs`` for the unique mean-zero ``u``.

    Preconditioned conjugate gradients on the mean-zero subspace: the
    right-hand side, every preconditioned residual and the iterate are
    projected, so the constant kernel of ``T`` never enters the Krylov space.

    Parameters
    ----------
    T : SparseSymmetricOperator
        Assembled operator with ``kappa > 0``.
    rhs : ndarray, shape (n, n)
        Compatible right-hand side (grid mean ~ 0).
    tol : float
        Target relative residual ``||rhs - T u|| / ||rhs||``.
    max_iter : int
    precond : {"auto", "lu", "amg", "jacobi", "none"} or prebuilt
        Preconditioner or a prebuilt one (anything with ``__matmul__`` or a
        ``matvec``) so repeated solves share a setup.

    Returns
    -------
    u : ndarray, shape (n, n)
    info : dict
        ``iterations`` and final relative ``residual``.
    """
    if T.kappa <= 0:
        raise DomainError("solve_cell requires kappa > 0 (the kernel may be larger otherwise)")
    n = T.n
    b = np.asarray(rhs, dtype=float).ravel()
    if b.shape[0] != T.dim:
        raise DataError(f"rhs has {b.shape[0]} entries, operator has {T.dim}")
    if not np.all(np.isfinite(b)):
        raise DataError("rhs contains non-finite values")
    scale = np.abs(b).max()
    if scale == 0.0:
        return np.zeros((n, n)), {"iterations": 0, "residual": 0.0}
    if abs(b.mean()) > COMPAT_TOL * scale:
        raise DataError(f"incompatible rhs: mean {b.mean():.3e} vs max {scale:.3e}")
    b = _project(b)
    bnorm = np.linalg.norm(b)

    M = make_preconditioner(T, precond) if isinstance(precond, (str, type(None))) else precond
    A = T.matrix

    x = np.zeros_like(b)
    r = b.copy()
    z = _project(M @ r) if M is not None else r.copy()
    p = z.copy()
    rz = r @ z
    trace = [1.0]
    for it in range(1, max_iter + 1):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise SolverError(f"loss of positive definiteness (p^T T p = {pAp:.3e})", trace)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r) / bnorm
        trace.append(res)
        if res <= tol:
            # replace the recursive residual by the true one before accepting
            x = _project(x)
            res = np.linalg.norm(b - A @ x) / bnorm
            trace[-1] = res
            if res <= tol:
                return x.reshape(n, n), {"iterations": it, "residual": res}
            r = b - A @ x
        z = _project(M @ r) if M is not None else r.copy()
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not reach tol={tol:g} in {max_iter} iterations "
                      f"(last residual {trace[-1]:.3e})", trace)


@dataclass
class CellSolution:
    """Mean-zero correctors for the unit directions."""

    phi1: np.ndarray
    phi2: np.ndarray
    iterations: tuple
    residuals: tuple

    def corrector(self, xi):
        """Corrector for a direction ``xi`` by linearity."""
        return xi[0] * self.phi1 + xi[1] * self.phi2


def solve_cells(A, T, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, precond="auto"):
    """Solve both cell problems against one operator and one preconditioner setup."""
    M = make_preconditioner(T, precond) if isinstance(precond, (str, type(None))) else precond
    phis, iters, res = [], [], []
    for i in (1, 2):
        phi, info = solve_cell(T, cell_rhs(A, i), tol=tol, max_iter=max_iter, precond=M)
        phis.append(phi)
        iters.append(info["iterations"])
        res.append(info["residual"])
    return CellSolution(phis[0], phis[1], tuple(iters), tuple(res))


def effective_matrix_flux(A, kappa, sol):
    """Average of the corrected flux ``(kappa I + A)(e_j + grad phi_j)``.

    Returns
    -------
    Hbar : ndarray, shape (2, 2)
        ``Hbar[i, j]`` is the ``i``-th component of the averaged flux for ``e_j``.
    eigs : ndarray, shape (2,)
        Eigenvalues of the symmetric part, ascending.
    """
    Hbar = np.empty((2, 2))
    for j, phi in enumerate((sol.phi1, sol.phi2)):
        g1, g2 = centered_gradient(phi)
        v1 = (1.0 if j == 0 else 0.0) + g1
        v2 = (1.0 if j == 1 else 0.0) + g2
        f1, f2 = A.apply(v1, v2)
        Hbar[0, j] = kappa * np.mean(v1) + np.mean(f1)
        Hbar[1, j] = kappa * np.mean(v2) + np.mean(f2)
    eigs = np.linalg.eigvalsh(0.5 * (Hbar + Hbar.T))
    return Hbar, eigs


def scalar_from_matrix(eigs, diag_tol=DIAG_TOL):
    """Scalar diffusivity from the two eigenvalues of the symmetrised matrix.

    The mean is used when the relative gap is below ``diag_tol``; otherwise the
    larger eigenvalue is returned and the split logged.
    """
    lo, hi = float(eigs[0]), float(eigs[1])
    gap = (hi - lo) / abs(hi) if hi != 0 else 0.0
    if gap < diag_tol:
        return 0.5 * (lo + hi), gap
    log.debug("effective matrix not isotropic: eigenvalues %.6g, %.6g", lo, hi)
    return hi, gap


def effective_scalar_variational(A, kappa, xi, phi, stencil="centered"):
    """Energy ``mean (xi + grad phi)^T (kappa I + A) (xi + grad phi)``.

    ``stencil="centered"`` uses the centred gradient. ``stencil="split"``
    averages the forward and backward energies; that is the functional the
    discrete corrector actually minimises, so for it any trial ``phi`` gives
    an exact upper bound on the solved value.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (2,) or abs(np.hypot(xi[0], xi[1]) - 1.0) > 1e-12:
        raise DomainError(f"xi must be a unit 2-vector, got {xi!r}")
    if stencil == "centered":
        grads = [centered_gradient(phi)]
    elif stencil == "split":
        grads = [(apply_diff(phi, 1, s), apply_diff(phi, 2, s)) for s in ("forward", "backward")]
    else:
        raise ValueError(f"unknown stencil {stencil!r}")
    total = 0.0
    for g1, g2 in grads:
        v1, v2 = xi[0] + g1, xi[1] + g2
        total += kappa * np.mean(v1 * v1 + v2 * v2) + np.mean(A.quadratic(v1, v2))
    return float(total / len(grads))


def energy_terms(A, kappa, xi, phi):
    """Split ``C_var`` into ``kappa``, ``kappa |grad phi|^2`` and the ``A``-energy."""
    g1, g2 = centered_gradient(phi)
    v1, v2 = xi[0] + g1, xi[1] + g2
    return float(kappa), float(kappa * np.mean(g1 * g1 + g2 * g2)), float(np.mean(A.quadratic(v1, v2)))


def principal_eigenvalue(T, tol=1e-10, max_iter=500, block=4, seed=0, solve_tol=None,
                         precond="auto"):
    """Smallest nonzero eigenvalue of ``T`` by inverse subspace iteration.

    Each sweep applies ``T^+`` through ``solve_cell`` to a small block of
    mean-zero vectors, followed by a Rayleigh-Ritz step. A block is used
    because the ground level is close to fourfold degenerate (the two
    lowest Fourier modes in each axis), which stalls single-vector iteration.

    Raises
    ------
    SolverError
        If the Rayleigh quotient has not settled after ``max_iter`` sweeps.
    """
    if T.kappa <= 0:
        raise DomainError("principal_eigenvalue requires kappa > 0")
    n = T.n
    solve_tol = tol * 1e-2 if solve_tol is None else solve_tol
    solve_tol = max(solve_tol, 1e-13)
    M = make_preconditioner(T, precond) if isinstance(precond, (str, type(None))) else precond
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((T.dim, block))
    X -= X.mean(axis=0)
    X, _ = np.linalg.qr(X)
    prev = np.inf
    trace = []
    for it in range(max_iter):
        Y = np.empty_like(X)
        for k in range(block):
            # rescale so the compatibility check sees a unit-size rhs
            b = X[:, k] - X[:, k].mean()
            s = np.abs(b).max()
            y, _ = solve_cell(T, (b / s).reshape(n, n), tol=solve_tol, precond=M)
            Y[:, k] = y.ravel() * s
        Q, _ = np.linalg.qr(Y)
        Q -= Q.mean(axis=0)
        Q, _ = np.linalg.qr(Q)
        TQ = T.matrix @ Q
        small = 0.5 * ((Q.T @ TQ) + (Q.T @ TQ).T)
        w, V = np.linalg.eigh(small)
        X = Q @ V
        lam = float(w[0])
        trace.append(lam)
        if abs(lam - prev) <= tol * abs(lam):
            log.debug("inverse iteration converged in %d sweeps: %.12g", it + 1, lam)
            return lam
        prev = lam
    raise SolverError(f"inverse iteration stagnated after {max_iter} sweeps", trace)


def laplacian_ground_eigenvalue(n):
    """``(2/d^2)(1 - cos(2 pi d))``, the smallest nonzero eigenvalue of the 5-point Laplacian."""
    d = 1.0 / n
    return 2.0 / d**2 * (1.0 - np.cos(2.0 * np.pi * d))


@dataclass
class DiffusivityRecord:
    """Outcome of one (c, kappa, d) cell computation."""

    c: float
    kappa: float
    d: float
    Hbar: np.ndarray
    C_flux: float
    C_var_e1: float
    C_var_e2: float
    offdiag_ratio: float
    grad_norm_sq: float
    cg_iters: int
    residual: float
    eig_gap: float = 0.0
    meta: dict = field(default_factory=dict)

    CSV_COLUMNS = ("c", "kappa", "d", "H11", "H12", "H21", "H22", "C_flux", "C_var_e1",
                   "C_var_e2", "offdiag_ratio", "grad_norm_sq", "cg_iters", "residual")

    @property
    def C_var(self):
        return 0.5 * (self.C_var_e1 + self.C_var_e2)

    def row(self):
        H = self.Hbar
        return [self.c, self.kappa, self.d, H[0, 0], H[0, 1], H[1, 0], H[1, 1], self.C_flux,
                self.C_var_e1, self.C_var_e2, self.offdiag_ratio, self.grad_norm_sq,
                self.cg_iters, self.residual]

    def to_dict(self):
        out = asdict(self)
        out["Hbar"] = self.Hbar.tolist()
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["Hbar"] = np.asarray(data["Hbar"], dtype=float)
        return cls(**data)

    def write(self, csv_path, json_path=None):
        """One CSV row with header, plus a JSON sidecar of parameters and versions."""
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_COLUMNS)
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in self.row()])
        if json_path is not None:
            meta = dict(self.meta)
            meta.update(versions={"python": platform.python_version(), "numpy": np.__version__,
                                  "scipy": scipy.__version__})
            with open(json_path, "w") as fh:
                json.dump(meta, fh, indent=2, sort_keys=True)


def diffusivity_record(A, kappa, T=None, c=float("nan"), tol=DEFAULT_TOL,
                       max_iter=DEFAULT_MAX_ITER, precond="auto", meta=None):
    """Solve both cell problems and collect flux and energy diffusivities."""
    from .fd_assembly import assemble_T

    if T is None:
        T = assemble_T(A, kappa)
    sol = solve_cells(A, T, tol=tol, max_iter=max_iter, precond=precond)
    Hbar, eigs = effective_matrix_flux(A, kappa, sol)
    C_flux, gap = scalar_from_matrix(eigs)
    c1 = effective_scalar_variational(A, kappa, (1.0, 0.0), sol.phi1)
    c2 = effective_scalar_variational(A, kappa, (0.0, 1.0), sol.phi2)
    g1, g2 = centered_gradient(sol.phi1)
    rec = DiffusivityRecord(
        c=float(c), kappa=float(kappa), d=1.0 / A.n, Hbar=Hbar, C_flux=float(C_flux),
        C_var_e1=c1, C_var_e2=c2,
        offdiag_ratio=float(0.5 * abs(Hbar[0, 1] + Hbar[1, 0]) / C_flux),
        grad_norm_sq=float(np.mean(g1 * g1 + g2 * g2)),
        cg_iters=int(sum(sol.iterations)), residual=float(max(sol.residuals)),
        eig_gap=float(gap), meta=dict(meta or {}))
    if C_flux < kappa * (1.0 - 1e-6):
        log.warning("C_flux=%.6g below kappa=%.6g", C_flux, kappa)
    if abs(C_flux - rec.C_var) > CROSS_TOL * C_flux:
        log.debug("flux/energy mismatch: %.6g vs %.6g", C_flux, rec.C_var)
    return rec
