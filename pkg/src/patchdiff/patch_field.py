"""Vortex-patch profile, covariance matrix field A(x) and its geometry checks.

Every patch is the perpendicular gradient of a radial stream function
supported in a ball of radius ``c``; the matrix field is the periodised sum
of the outer products of the patches centred on the integer lattice.

Grid convention: node ``(i, j)`` sits at ``x = (i*d, j*d)`` with ``d = 1/n``
(vertex centred), so lattice isometries act as exact node permutations when
``n`` is even.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson

from .errors import ConfigurationError, DomainError, PreconditionError

# exp() below this exponent underflows to a subnormal; treat as exact zero
EXP_FLOOR = -745.0

SQRT5_HALF = math.sqrt(5.0) / 2.0


# ---------------------------------------------------------------------------
# Parameters and grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid2D:
    """Uniform periodic ``n x n`` grid of the unit torus."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 8:
            raise PreconditionError(f"grid needs an integer n >= 8, got {self.n!r}")

    @property
    def d(self):
        return 1.0 / self.n

    def indices(self):
        i = np.arange(self.n)
        return np.meshgrid(i, i, indexing="ij")

    def coords(self):
        """Node coordinates ``(x1, x2)`` as two ``(n, n)`` arrays."""
        i1, i2 = self.indices()
        return i1 * self.d, i2 * self.d

    def inner(self, u, v):
        """Discrete L2(T^2) inner product (quadrature weight d^2)."""
        return float(np.sum(u * v)) / self.n**2


def radial_l2_norm(profile, c, quad_n=4096):
    """L2 norm over the plane of a radial vector field with magnitude ``profile(r)``.

    Returns ``sqrt(2*pi * int_0^c r profile(r)^2 dr)`` from composite Simpson
    quadrature on ``quad_n`` panels.
    """
    if quad_n < 256:
        raise PreconditionError(f"quad_n must be >= 256, got {quad_n}")
    quad_n += quad_n % 2
    r = np.linspace(0.0, c, quad_n + 1)
    vals = np.asarray(profile(r), dtype=float)
    return math.sqrt(2.0 * math.pi * simpson(r * vals**2, x=r))


@dataclass(frozen=True)
class PatchParams:
    """Vortex patch parameters.

    ``norm`` is the planar L2 norm of the unnormalised field ``x^perp/|x| phi(|x|)``
    and is computed on construction; the amplitude ``lam`` is applied on top
    of the normalised field.
    """

    c: float
    a1: float = 0.05
    a2: float = 0.3
    lam: float = 1.0
    quad_n: int = 4096
    norm: float = field(init=False)

    def __post_init__(self):
        for name in ("c", "a1", "a2", "lam"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise DomainError(f"{name} must be finite and > 0, got {val!r}")
        object.__setattr__(self, "norm", compute_norm(self, self.quad_n))

    def scaled(self, lam):
        return PatchParams(self.c, self.a1, self.a2, lam, self.quad_n)


# ---------------------------------------------------------------------------
# Profile and single-patch field
# ---------------------------------------------------------------------------

def profile_phi(r, p):
    """Radial profile ``r^-2 exp(-a1/r^2) exp(-a2 r^2/|r-c|)`` on ``0 < r < c``, else 0.

    Accepts scalars or arrays. The limits at ``r = 0`` and ``r = c`` are zero and
    are returned through explicit branches.
    """
    r_arr = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r_arr)):
        raise DomainError("profile_phi needs finite radii")
    inside = (r_arr > 0.0) & (r_arr < p.c)
    rs = np.where(inside, r_arr, 0.5 * p.c)
    # rs**2 may underflow for tiny radii; the -inf exponent maps to an exact zero
    with np.errstate(divide="ignore", over="ignore"):
        expo = -p.a1 / rs**2 - p.a2 * rs**2 / np.abs(rs - p.c) - 2.0 * np.log(rs)
    out = np.where(inside & (expo > EXP_FLOOR), np.exp(np.maximum(expo, EXP_FLOOR)), 0.0)
    if np.ndim(r) == 0:
        return float(out)
    return out


def compute_norm(p, quad_n=4096):
    """Planar L2 norm of the unnormalised patch field for profile parameters ``p``."""
    val = radial_l2_norm(lambda r: profile_phi(r, p), p.c, quad_n)
    if not val > 0.0 or not np.isfinite(val):
        raise ConfigurationError(
            f"profile vanishes identically for c={p.c}, a1={p.a1}, a2={p.a2}")
    return val


def grad_perp_psi(x, p):
    """Normalised patch field ``lam * x^perp/|x| * phi(|x|)/norm`` at points ``x[..., 2]``."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("grad_perp_psi needs finite points")
    return _patch_from_offsets(x[..., 0], x[..., 1], p)


def _patch_from_offsets(y1, y2, p):
    r = np.hypot(y1, y2)
    safe = np.where(r > 0.0, r, 1.0)
    amp = p.lam * profile_phi(r, p) / p.norm / safe
    return np.stack([-y2 * amp, y1 * amp], axis=-1)


# ---------------------------------------------------------------------------
# Matrix field
# ---------------------------------------------------------------------------

@dataclass
class SymMatrixField:
    """Per-node symmetric 2x2 matrix field stored by its three independent entries."""

    a11: np.ndarray
    a12: np.ndarray
    a22: np.ndarray

    @property
    def n(self):
        return self.a11.shape[0]

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, n)), np.zeros((n, n)), np.zeros((n, n)))

    def eigenvalues(self):
        """Smaller and larger eigenvalue at every node."""
        half_tr = 0.5 * (self.a11 + self.a22)
        rad = np.hypot(0.5 * (self.a11 - self.a22), self.a12)
        return half_tr - rad, half_tr + rad

    def quadratic(self, xi1, xi2):
        return self.a11 * xi1 * xi1 + 2.0 * self.a12 * xi1 * xi2 + self.a22 * xi2 * xi2

    def apply(self, v1, v2):
        return self.a11 * v1 + self.a12 * v2, self.a12 * v1 + self.a22 * v2

    def scale(self, s):
        return SymMatrixField(s * self.a11, s * self.a12, s * self.a22)

    def max_abs(self):
        return float(max(np.abs(self.a11).max(), np.abs(self.a12).max(), np.abs(self.a22).max()))

    def to_csv(self, path):
        n = self.n
        d = 1.0 / n
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "x1", "x2", "a11", "a12", "a22"])
            for i in range(n):
                for j in range(n):
                    w.writerow([i, j, repr(i * d), repr(j * d), repr(float(self.a11[i, j])),
                                repr(float(self.a12[i, j])), repr(float(self.a22[i, j]))])


def summation_box(c):
    """Half-width ``K = ceil(c) + 1`` of the lattice box feeding every node."""
    return int(math.ceil(c)) + 1


def assemble_A(grid, p, N=1):
    """Covariance field ``A^N(x) = sum_k s(Nx - k) (x) s(Nx - k)`` on ``grid``.

    ``N = 1`` is the cell field A; larger ``N`` gives the rescaled field of
    patches with spacing, radius and intensity ``1/N``.
    Offsets are formed in integer arithmetic, ``(N*i - k*n) * d``, so that
    the field is exactly lattice symmetric.
    """
    n = grid.n
    K = summation_box(p.c)
    i1, i2 = grid.indices()
    d = grid.d
    a11 = np.zeros((n, n))
    a12 = np.zeros((n, n))
    a22 = np.zeros((n, n))
    ks = range(-K, N + K + 1)
    for k1 in ks:
        y1 = (N * i1 - k1 * n) * d
        if np.abs(y1).min() >= p.c:
            continue
        for k2 in ks:
            y2 = (N * i2 - k2 * n) * d
            if np.hypot(np.abs(y1).min(), np.abs(y2).min()) >= p.c:
                continue
            s = _patch_from_offsets(y1, y2, p)
            a11 += s[..., 0] * s[..., 0]
            a12 += s[..., 0] * s[..., 1]
            a22 += s[..., 1] * s[..., 1]
    return SymMatrixField(a11, a12, a22)


# ---------------------------------------------------------------------------
# Support classification
# ---------------------------------------------------------------------------

ZERO, RANK_DEFICIENT, FULL_RANK = 0, 1, 2
LABEL_NAMES = {ZERO: "zero", RANK_DEFICIENT: "rank-deficient", FULL_RANK: "full-rank"}


@dataclass
class SupportClassification:
    labels: np.ndarray
    counts: dict
    tol_rank: float


def classify_support(field_or_grid, p=None, rel_tol=1e-10):
    """Label each node by the rank of A(x).

    Accepts an assembled :class:`SymMatrixField`, or a ``(grid, params)`` pair
    in which case the field is assembled first. An eigenvalue counts as zero
    when below ``rel_tol`` times the largest eigenvalue on the grid.
    """
    if isinstance(field_or_grid, SymMatrixField):
        A = field_or_grid
    else:
        A = assemble_A(field_or_grid, p)
    lo, hi = A.eigenvalues()
    top = float(hi.max())
    tol = rel_tol * top if top > 0 else 0.0
    # exact zeros must always classify as zero, hence the <= on a zero tol
    small_lo = lo <= tol
    small_hi = hi <= tol
    labels = np.full(A.a11.shape, FULL_RANK, dtype=np.int8)
    labels[small_lo] = RANK_DEFICIENT
    labels[small_lo & small_hi] = ZERO
    counts = {LABEL_NAMES[k]: int(np.count_nonzero(labels == k)) for k in LABEL_NAMES}
    return SupportClassification(labels, counts, tol)


# ---------------------------------------------------------------------------
# Lattice isometries
# ---------------------------------------------------------------------------

ROT_J = np.array([[0, 1], [-1, 0]])
REFL_R = np.array([[1, 0], [0, -1]])


def dihedral_group():
    """The eight integer orthogonal matrices generated by ``J`` and ``r``."""
    out = []
    g = np.eye(2, dtype=int)
    for _ in range(4):
        out.append(g.copy())
        out.append(g @ REFL_R)
        g = g @ ROT_J
    return out


def conjugate_by_J(R):
    """``R^J = J R J^T``."""
    return ROT_J @ R @ ROT_J.T


def isometry_node_map(n, R):
    """Index arrays ``(i', j')`` of the node ``R(x - j) + j`` with ``j = (1/2, 1/2)``."""
    if n % 2:
        raise PreconditionError("isometry checks need an even grid size")
    i1, i2 = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    h = n // 2
    o1, o2 = i1 - h, i2 - h
    m1 = (R[0, 0] * o1 + R[0, 1] * o2 + h) % n
    m2 = (R[1, 0] * o1 + R[1, 1] * o2 + h) % n
    return m1, m2


def transform_field(A, R):
    """Field ``B(x) = R^J A(R~^-1 x) (R^J)^T``; equal to A when A is lattice symmetric."""
    m1, m2 = isometry_node_map(A.n, R)
    Q = conjugate_by_J(R).astype(float)
    b11 = np.empty_like(A.a11)
    b12 = np.empty_like(A.a12)
    b22 = np.empty_like(A.a22)
    # node x maps to m(x); B(m(x)) = Q A(x) Q^T
    c11 = Q[0, 0] ** 2 * A.a11 + 2 * Q[0, 0] * Q[0, 1] * A.a12 + Q[0, 1] ** 2 * A.a22
    c12 = (Q[0, 0] * Q[1, 0] * A.a11 + (Q[0, 0] * Q[1, 1] + Q[0, 1] * Q[1, 0]) * A.a12
           + Q[0, 1] * Q[1, 1] * A.a22)
    c22 = Q[1, 0] ** 2 * A.a11 + 2 * Q[1, 0] * Q[1, 1] * A.a12 + Q[1, 1] ** 2 * A.a22
    b11[m1, m2] = c11
    b12[m1, m2] = c12
    b22[m1, m2] = c22
    return SymMatrixField(b11, b12, b22)


def verify_isometry_symmetry(A, R):
    """Max over nodes of ``|A(R~x) - R^J A(x) (R^J)^T|_inf``, compared node to node."""
    B = transform_field(A, np.asarray(R))
    return float(max(np.abs(B.a11 - A.a11).max(), np.abs(B.a12 - A.a12).max(),
                     np.abs(B.a22 - A.a22).max()))


# ---------------------------------------------------------------------------
# Cone lemma
# ---------------------------------------------------------------------------

CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])


def cone_margins(points, directions, max_dist=SQRT5_HALF):
    """Best achievable ``|v . (x-k)^perp/|x-k|| - 1/sqrt(2)`` for every (x, v) pair.

    The maximum runs over corners ``k`` of the unit square with
    ``0 < |x - k| <= max_dist``. Returns an array of shape
    ``(len(points), len(directions))``.
    """
    pts = np.asarray(points, dtype=float)
    dirs = np.asarray(directions, dtype=float)
    off = pts[:, None, :] - CORNERS[None, :, :]
    dist = np.hypot(off[..., 0], off[..., 1])
    valid = (dist > 0.0) & (dist <= max_dist)
    safe = np.where(dist > 0.0, dist, 1.0)
    perp = np.stack([-off[..., 1] / safe, off[..., 0] / safe], axis=-1)
    cos = np.abs(np.einsum("pkc,vc->pkv", perp, dirs))
    cos = np.where(valid[..., None], cos, -np.inf)
    return cos.max(axis=1) - 1.0 / math.sqrt(2.0)


def verify_cone_lemma(n_x=128, n_angle=360, chunk=2048, max_dist=SQRT5_HALF):
    """Brute-force the corner-cone lemma on an ``n_x^2`` point grid and ``n_angle`` directions.

    Points are ``linspace(0, 1, n_x)`` in each axis, directions are
    ``2*pi*m/n_angle``. Returns ``(holds, worst_margin)`` where ``holds`` means
    every pair has a strictly positive margin. ``max_dist=np.inf`` drops the
    distance requirement on the corner.
    """
    if n_x < 64 or n_angle < 180:
        raise PreconditionError("cone lemma scan needs n_x >= 64 and n_angle >= 180")
    s = np.linspace(0.0, 1.0, n_x)
    X1, X2 = np.meshgrid(s, s, indexing="ij")
    pts = np.column_stack([X1.ravel(), X2.ravel()])
    th = 2.0 * np.pi * np.arange(n_angle) / n_angle
    dirs = np.column_stack([np.cos(th), np.sin(th)])
    worst = np.inf
    for start in range(0, len(pts), chunk):
        worst = min(worst, float(cone_margins(pts[start:start + chunk], dirs, max_dist).min()))
    return worst > 0.0, worst
