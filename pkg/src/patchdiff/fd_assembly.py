"""Periodic finite-difference divergence-form operator and right-hand sides.

Node ordering is row-major: node ``(i, j)`` has flat index ``i*n + j`` where
``i`` runs along x1 (axis 1) and ``j`` along x2 (axis 2).

The operator is the average of the two one-sided splittings

    T u = -1/2 sum_i D_i^- (sum_j H_ij D_j^+ u) - 1/2 sum_i D_i^+ (sum_j H_ij D_j^- u)

with ``H = kappa I + A`` evaluated at nodes. Since ``D^- = -(D^+)^T`` this is
``1/2 (G+^T H G+ + G-^T H G-)`` for the stacked one-sided gradients, so T is
symmetric positive semidefinite with the constants in its kernel.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DomainError


def apply_diff(f, axis, direction, d=None):
    """Periodic one-sided difference of a node field along ``axis`` (1 or 2)."""
    f = np.asarray(f, dtype=float)
    if d is None:
        d = 1.0 / f.shape[0]
    ax = axis - 1
    if direction == "forward":
        return (np.roll(f, -1, axis=ax) - f) / d
    if direction == "backward":
        return (f - np.roll(f, 1, axis=ax)) / d
    raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")


def centered_diff(f, axis, d=None):
    """``1/2 (D^+ + D^-)`` along ``axis``."""
    f = np.asarray(f, dtype=float)
    if d is None:
        d = 1.0 / f.shape[0]
    ax = axis - 1
    return (np.roll(f, -1, axis=ax) - np.roll(f, 1, axis=ax)) / (2.0 * d)


def centered_gradient(u):
    return centered_diff(u, 1), centered_diff(u, 2)


def divergence(F1, F2):
    """Centred divergence ``1/2 sum_i (D_i^- + D_i^+) F_i``."""
    return centered_diff(F1, 1) + centered_diff(F2, 2)


def cell_rhs(A, i):
    """Right-hand side ``div(A e_i)`` of the cell problem in direction ``e_i``."""
    if i == 1:
        return divergence(A.a11, A.a12)
    if i == 2:
        return divergence(A.a12, A.a22)
    raise ValueError(f"direction index must be 1 or 2, got {i!r}")


def _shift_matrix(n, axis, step):
    """Sparse S with ``(S u)(x) = u(x + step e_axis)``."""
    idx = np.arange(n * n).reshape(n, n)
    src = np.roll(idx, -step, axis=axis - 1).ravel()
    return sp.csr_matrix((np.ones(n * n), (idx.ravel(), src)), shape=(n * n, n * n))


def difference_matrices(n):
    """Sparse forward and backward difference matrices ``(D1+, D2+, D1-, D2-)``."""
    eye = sp.identity(n * n, format="csr")
    inv_d = float(n)
    d1p = (_shift_matrix(n, 1, 1) - eye) * inv_d
    d2p = (_shift_matrix(n, 2, 1) - eye) * inv_d
    d1m = (eye - _shift_matrix(n, 1, -1)) * inv_d
    d2m = (eye - _shift_matrix(n, 2, -1)) * inv_d
    return d1p, d2p, d1m, d2m


@dataclass
class SparseSymmetricOperator:
    """Assembled ``T`` for one coefficient field; immutable after assembly."""

    matrix: sp.csr_matrix
    n: int
    kappa: float

    @property
    def dim(self):
        return self.n * self.n

    def __matmul__(self, u):
        return self.matrix @ u

    def apply(self, u):
        """Apply to an ``(n, n)`` node field."""
        return (self.matrix @ np.asarray(u).ravel()).reshape(self.n, self.n)

    def diagonal(self):
        return self.matrix.diagonal()

    def quadratic(self, u):
        u = np.asarray(u).ravel()
        return float(u @ (self.matrix @ u))

    def triplets(self):
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order], coo.col[order], coo.data[order]

    def dump(self, path):
        """Write ``row col value`` lines (17 significant digits)."""
        rows, cols, vals = self.triplets()
        with open(path, "w") as fh:
            fh.write(f"# n={self.n} kappa={self.kappa!r} dim={self.dim}\n")
            for r, c, v in zip(rows, cols, vals):
                fh.write(f"{r} {c} {v:.17g}\n")


def assemble_T(A, kappa):
    """Assemble ``T`` for ``H = kappa I + A`` on the grid carrying ``A``.

    The result is bit-exactly symmetric and its diagonal is set to minus the
    off-diagonal row sum so that constants lie in the kernel.
    """
    if not np.isfinite(kappa) or kappa < 0:
        raise DomainError(f"kappa must be finite and >= 0, got {kappa!r}")
    n = A.n
    d1p, d2p, d1m, d2m = difference_matrices(n)
    h11 = sp.diags(kappa + A.a11.ravel())
    h12 = sp.diags(A.a12.ravel())
    h22 = sp.diags(kappa + A.a22.ravel())

    def half(g1, g2):
        f1 = h11 @ g1 + h12 @ g2
        f2 = h12 @ g1 + h22 @ g2
        return g1.T @ f1 + g2.T @ f2

    T = 0.5 * (half(d1p, d2p) + half(d1m, d2m))
    T = ((T + T.T) * 0.5).tocsr()
    T.eliminate_zeros()
    T.sum_duplicates()
    # exact kernel: overwrite the diagonal with minus the off-diagonal sum
    off = T - sp.diags(T.diagonal())
    off.eliminate_zeros()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    T = (off + sp.diags(diag)).tocsr()
    T.sort_indices()
    return SparseSymmetricOperator(T, n, float(kappa))


def split_energy(A, kappa, v1, v2, u=None):
    """Mean of ``1/2 [(v+G+u)^T H (v+G+u) + (v+G-u)^T H (v+G-u)]`` over nodes.

    ``v1, v2`` are constant or node-valued shifts (e.g. a unit direction).
    This is the discrete energy whose minimiser is the cell corrector.
    """
    n = A.n
    if u is None:
        u = np.zeros((n, n))
    out = 0.0
    for direction in ("forward", "backward"):
        g1 = v1 + apply_diff(u, 1, direction)
        g2 = v2 + apply_diff(u, 2, direction)
        out += np.mean((kappa + A.a11) * g1 * g1 + 2.0 * A.a12 * g1 * g2
                       + (kappa + A.a22) * g2 * g2)
    return 0.5 * float(out)
