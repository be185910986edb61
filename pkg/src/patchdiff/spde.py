"""Monte Carlo simulation of the Ito transport equation with patch noise.

On an ``n x n`` grid the equation

    du = div((kappa I + A^N) grad u) dt + sqrt(2) sum_k (sigma_k . grad u) dW^k

is stepped with Euler-Maruyama. The drift uses the same divergence-form
stencil as the cell problem and the noise the centred gradient. ``A^N`` is
always built as ``sum_k sigma_k (x) sigma_k`` from the simulator's own patch
vectors, so the noise quadratic variation and the drift match exactly.
"""

import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.integrate import cumulative_simpson

from .errors import ConfigurationError, DataError, PreconditionError
from .fd_assembly import assemble_T, centered_diff, centered_gradient
from .patch_field import Grid2D, PatchParams, SymMatrixField, _patch_from_offsets, profile_phi

log = logging.getLogger(__name__)

MODES = ("stream", "sampled")


# ---------------------------------------------------------------------------
# Patch vectors
# ---------------------------------------------------------------------------

def stream_profile(p, quad_n=8192):
    """Tabulated stream profile ``f`` with ``f' = lam phi / norm`` and ``f(r) = 0`` for ``r >= c``."""
    r = np.linspace(0.0, p.c, quad_n + 1)
    dfdr = p.lam * profile_phi(r, p) / p.norm
    # integral from 0, then shift so that f(c) = 0
    F = cumulative_simpson(dfdr, x=r, initial=0.0)
    f = F - F[-1]

    def evaluate(rho):
        rho = np.asarray(rho, dtype=float)
        return np.where(rho < p.c, np.interp(rho, r, f), 0.0)

    return evaluate


def _periodic_offsets(grid, N, k):
    """Offsets ``N x - k`` wrapped to the nearest periodic image, in patch units."""
    i1, i2 = grid.indices()
    n = grid.n
    out = []
    for idx, kk in ((i1, k[0]), (i2, k[1])):
        # integer arithmetic: N*i - k*n in units of d, wrapped into [-n*N/2, n*N/2)
        m = (N * idx - kk * n) % (N * n)
        m = np.where(m >= (N * n) // 2, m - N * n, m)
        out.append(m / n)
    return out


@dataclass
class PatchSet:
    """The ``N^2`` periodised patch vectors on one grid and their covariance.

    Attributes
    ----------
    sigma : ndarray, shape (N^2, 2, n, n)
    A_N : SymMatrixField
        ``sum_k sigma_k (x) sigma_k`` built from ``sigma``.
    """

    N: int
    grid: Grid2D
    params: PatchParams
    mode: str
    sigma: np.ndarray
    A_N: SymMatrixField
    _ops: dict = field(default_factory=dict, repr=False)

    @property
    def count(self):
        return self.sigma.shape[0]

    def centers(self):
        return [(k1 / self.N, k2 / self.N) for k1 in range(self.N) for k2 in range(self.N)]

    def drift_operator(self, kappa):
        key = float(kappa)
        if key not in self._ops:
            self._ops[key] = assemble_T(self.A_N, kappa)
        return self._ops[key]

    def lambda_max(self):
        return float(self.A_N.eigenvalues()[1].max())

    def cfl_dt(self, kappa):
        """Largest admissible step ``d^2 / (4 (kappa + max lambda_max(A^N)))``."""
        return self.grid.d**2 / (4.0 * (kappa + self.lambda_max()))


def build_patch_vectors(N, grid, params, mode="stream"):
    """Patch vectors ``sigma_k(x) = grad_perp psi(N x - k)`` for ``k`` in ``{0..N-1}^2``.

    ``mode="sampled"`` evaluates the analytic field at the nodes, so the
    covariance equals ``assemble_A(grid, params, N)`` to rounding.
    ``mode="stream"`` takes centred differences of the discrete stream
    ``psi(N x - k) / N``; the centred divergence then vanishes identically.
    Patches whose support reaches their own periodic image (``c/N > 1/2``)
    are folded onto the torus by keeping the nearest image only, and a
    warning is logged.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if int(N) != N or N < 1:
        raise PreconditionError(f"N must be a positive integer, got {N!r}")
    if grid.n % N:
        raise PreconditionError(f"grid n={grid.n} is not divisible by N={N}")
    if params.c / N > 0.5:
        log.warning("patch radius c/N=%.3g exceeds 1/2: the covariance identity with the "
                    "unit-cell field no longer holds (r >= 1/(2c))", params.c / N)
    f = stream_profile(params) if mode == "stream" else None
    n = grid.n
    sig = np.zeros((N * N, 2, n, n))
    for k1 in range(N):
        for k2 in range(N):
            y1, y2 = _periodic_offsets(grid, N, (k1, k2))
            idx = k1 * N + k2
            if mode == "sampled":
                s = _patch_from_offsets(y1, y2, params)
                sig[idx, 0], sig[idx, 1] = s[..., 0], s[..., 1]
            else:
                psi = f(np.hypot(y1, y2)) / N
                sig[idx, 0] = -centered_diff(psi, 2)
                sig[idx, 1] = centered_diff(psi, 1)
    s1, s2 = sig[:, 0], sig[:, 1]
    A = SymMatrixField(np.einsum("kij,kij->ij", s1, s1), np.einsum("kij,kij->ij", s1, s2),
                       np.einsum("kij,kij->ij", s2, s2))
    return PatchSet(int(N), grid, params, mode, sig, A)


def quadratic_form_AN(v, patches):
    """``sum_k <v, sigma_k>^2`` with the grid L2 inner product."""
    v1, v2 = v
    proj = (np.einsum("kij,ij->k", patches.sigma[:, 0], v1)
            + np.einsum("kij,ij->k", patches.sigma[:, 1], v2)) / patches.grid.n**2
    return float(proj @ proj)


def noise_terms(u, patches):
    """``sigma_k . grad u`` for every patch, shape ``(N^2, n, n)``."""
    g1, g2 = centered_gradient(u)
    return patches.sigma[:, 0] * g1 + patches.sigma[:, 1] * g2


def noise_energy(u, patches):
    """``sum_k ||sigma_k . grad u||^2`` (grid L2)."""
    s = noise_terms(u, patches)
    return float(np.sum(s * s)) / patches.grid.n**2


def drift_energy(u, patches):
    """``<grad u, A^N grad u>`` with the centred gradient."""
    g1, g2 = centered_gradient(u)
    return float(np.mean(patches.A_N.quadratic(g1, g2)))


# ---------------------------------------------------------------------------
# Time stepping
# ---------------------------------------------------------------------------

def _check_cfl(dt, kappa, patches):
    if not (np.isfinite(dt) and dt > 0):
        raise ConfigurationError(f"dt must be positive, got {dt!r}")
    dt_max = patches.cfl_dt(kappa)
    if dt > dt_max * (1.0 + 1e-12):
        raise ConfigurationError(f"dt={dt:.3e} violates the step bound {dt_max:.3e}")


def step_ito(u, dt, kappa, patches, rng=None, xi=None):
    """One Euler-Maruyama step (reference implementation, single path).

    ``u+ = u - dt T u + sqrt(2 dt) sum_k xi_k sigma_k . grad u`` with
    independent standard normals ``xi_k`` drawn from ``rng`` (or passed in).
    """
    _check_cfl(dt, kappa, patches)
    T = patches.drift_operator(kappa)
    out = u - dt * T.apply(u)
    if xi is None and rng is not None:
        xi = rng.standard_normal(patches.count)
    if xi is not None:
        out = out + math.sqrt(2.0 * dt) * np.tensordot(xi, noise_terms(u, patches), axes=1)
    return out


def _stencil_tables(T):
    """Padded per-row neighbour and coefficient tables of a CSR matrix."""
    M = T.matrix
    m = M.shape[0]
    counts = np.diff(M.indptr)
    width = int(counts.max())
    nbr = np.repeat(np.arange(m), width).reshape(m, width)
    coef = np.zeros((m, width))
    for r in range(width):
        has = counts > r
        pos = M.indptr[:-1][has] + r
        nbr[has, r] = M.indices[pos]
        coef[has, r] = M.data[pos]
    return nbr, coef


def _incidence(patches):
    """CSR-style list of (patch, sigma_1, sigma_2) covering each node."""
    m = patches.grid.n**2
    s = patches.sigma.reshape(patches.count, 2, m)
    support = (s[:, 0] != 0) | (s[:, 1] != 0)
    k_idx, node = np.nonzero(support)
    order = np.lexsort((k_idx, node))
    k_idx, node = k_idx[order], node[order]
    ptr = np.zeros(m + 1, dtype=np.int64)
    np.add.at(ptr, node + 1, 1)
    ptr = np.cumsum(ptr)
    vals = np.column_stack([s[k_idx, 0, node], s[k_idx, 1, node]])
    return ptr, k_idx.astype(np.int64), vals


def _gradient_neighbours(n):
    i = np.arange(n * n)
    i1, i2 = i // n, i % n
    return np.column_stack([((i1 + 1) % n) * n + i2, ((i1 - 1) % n) * n + i2,
                            i1 * n + (i2 + 1) % n, i1 * n + (i2 - 1) % n]).astype(np.int64)


@numba.njit(cache=True)
def _ito_step_batch(U, out, nbr, coef, gnb, inc_ptr, inc_k, inc_s, xi, dt, amp, inv2d, v1, v2):
    m, P = U.shape
    width = nbr.shape[1]
    for i in range(m):
        for p in range(P):
            out[i, p] = U[i, p]
        for s in range(width):
            j = nbr[i, s]
            c = dt * coef[i, s]
            for p in range(P):
                out[i, p] -= c * U[j, p]
        for p in range(P):
            v1[p] = 0.0
            v2[p] = 0.0
        for q in range(inc_ptr[i], inc_ptr[i + 1]):
            k = inc_k[q]
            a = inc_s[q, 0]
            b = inc_s[q, 1]
            for p in range(P):
                v1[p] += a * xi[k, p]
                v2[p] += b * xi[k, p]
        e1p = gnb[i, 0]
        e1m = gnb[i, 1]
        e2p = gnb[i, 2]
        e2m = gnb[i, 3]
        for p in range(P):
            out[i, p] += amp * inv2d * (v1[p] * (U[e1p, p] - U[e1m, p])
                                        + v2[p] * (U[e2p, p] - U[e2m, p]))


class BatchStepper:
    """Fused drift + noise step for a block of paths (paths contiguous in memory)."""

    def __init__(self, patches, kappa, dt):
        _check_cfl(dt, kappa, patches)
        self.patches = patches
        self.dt = float(dt)
        T = patches.drift_operator(kappa)
        self.nbr, self.coef = _stencil_tables(T)
        self.gnb = _gradient_neighbours(patches.grid.n)
        self.inc_ptr, self.inc_k, self.inc_s = _incidence(patches)
        self.amp = math.sqrt(2.0 * dt)
        self.inv2d = patches.grid.n / 2.0

    def step(self, U, xi, out=None):
        """``U`` has shape ``(n*n, P)``; ``xi`` has shape ``(N^2, P)``."""
        if out is None:
            out = np.empty_like(U)
        P = U.shape[1]
        v1 = np.empty(P)
        v2 = np.empty(P)
        _ito_step_batch(U, out, self.nbr, self.coef, self.gnb, self.inc_ptr, self.inc_k,
                        self.inc_s, np.ascontiguousarray(xi), self.dt, self.amp, self.inv2d,
                        v1, v2)
        return out


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

@dataclass
class NoiseConfig:
    """Simulation parameters.

    ``r = theta = 1/N``. ``dt=None`` selects the largest admissible step
    rounded down so that the recording instants fall on steps.
    """

    N: int
    seed: int = 0
    dt: float = None
    paths: int = 64
    kappa: float = 0.05
    params: PatchParams = None
    n: int = 128
    mode: str = "stream"
    noise: bool = True

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ConfigurationError(f"N must be an integer >= 2, got {self.N!r}")
        if self.dt is not None and not self.dt > 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt!r}")
        if self.paths < 1:
            raise ConfigurationError("paths must be >= 1")
        if not self.kappa > 0:
            raise ConfigurationError("kappa must be > 0")
        if self.params is None:
            self.params = PatchParams(1.0)
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if 1.0 / self.N >= 1.0 / (2.0 * self.params.c):
            log.warning("r=1/N=%.3g is not below 1/(2c)=%.3g", 1.0 / self.N,
                        1.0 / (2.0 * self.params.c))

    def manifest(self):
        return {"N": self.N, "seed": self.seed, "dt": self.dt, "paths": self.paths,
                "kappa": self.kappa, "c": self.params.c, "a1": self.params.a1,
                "a2": self.params.a2, "lam": self.params.lam, "n": self.n, "mode": self.mode,
                "noise": self.noise}


@dataclass
class ScalarPath:
    times: np.ndarray
    observables: np.ndarray
    energy: np.ndarray


@dataclass
class Ensemble:
    """Recorded observables of all paths.

    ``observables`` has shape ``(paths, n_test, n_times)`` and ``energy`` shape
    ``(paths, n_times)``.
    """

    config: NoiseConfig
    times: np.ndarray
    observables: np.ndarray
    energy: np.ndarray
    dt: float
    steps: int
    u0: np.ndarray = None

    @property
    def c(self):
        return self.config.params.c

    @property
    def kappa(self):
        return self.config.kappa

    def path(self, i):
        return ScalarPath(self.times, self.observables[i], self.energy[i])

    def mean_observable(self):
        """Path mean with compensated summation, shape ``(n_test, n_times)``."""
        P = self.observables.shape[0]
        flat = self.observables.reshape(P, -1)
        return np.array([math.fsum(col) / P for col in flat.T]).reshape(self.observables.shape[1:])

    def var_observable(self):
        return self.observables.var(axis=0, ddof=1) if self.observables.shape[0] > 1 else \
            np.zeros(self.observables.shape[1:])

    def mean_energy(self):
        P = self.energy.shape[0]
        return np.array([math.fsum(col) / P for col in self.energy.T])


def _draw_block(gens, count, steps):
    """Standard normals of shape ``(steps, count, P)``, one generator per path."""
    return np.stack([g.standard_normal((steps, count)) for g in gens], axis=-1)


def simulate(u0, T_end, config, test_functions, n_records=41, patches=None, block=256):
    """Evolve ``config.paths`` independent realisations up to ``T_end``.

    Parameters
    ----------
    u0 : ndarray, shape (n, n)
    T_end : float
    config : NoiseConfig
    test_functions : sequence of ndarray, shape (n, n)
    n_records : int
        Number of equally spaced recording instants including ``0`` and ``T_end``.
    patches : PatchSet, optional
        Reused if given (must match ``config``).

    Returns
    -------
    Ensemble
    """
    grid = Grid2D(config.n)
    if patches is None:
        patches = build_patch_vectors(config.N, grid, config.params, config.mode)
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (grid.n, grid.n):
        raise DataError(f"u0 has shape {u0.shape}, expected {(grid.n, grid.n)}")
    phis = np.array([np.asarray(f, dtype=float).ravel() for f in test_functions])
    intervals = n_records - 1
    if intervals < 1 or not T_end > 0:
        raise ConfigurationError("need T_end > 0 and at least two recording instants")
    dt_target = config.dt if config.dt is not None else patches.cfl_dt(config.kappa)
    per = max(1, math.ceil(T_end / intervals / dt_target - 1e-9))
    steps = per * intervals
    dt = T_end / steps
    stepper = BatchStepper(patches, config.kappa, dt)

    P = config.paths
    m = grid.n**2
    gens = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(P)]
    U = np.repeat(u0.reshape(m, 1), P, axis=1)
    buf = np.empty_like(U)
    obs = np.empty((P, len(phis), n_records))
    energy = np.empty((P, n_records))

    def record(slot):
        obs[:, :, slot] = (phis @ U).T / m
        energy[:, slot] = np.einsum("ip,ip->p", U, U) / m

    record(0)
    zero_xi = np.zeros((patches.count, P))
    done = 0
    slot = 0
    while done < steps:
        nb = min(block, steps - done)
        xis = _draw_block(gens, patches.count, nb) if config.noise else None
        for s in range(nb):
            stepper.step(U, xis[s] if xis is not None else zero_xi, out=buf)
            U, buf = buf, U
            done += 1
            if done % per == 0:
                slot += 1
                record(slot)
        if not np.all(np.isfinite(U)):
            raise DataError(f"non-finite state after {done} steps")
    times = np.linspace(0.0, T_end, n_records)
    log.info("simulated N=%d paths=%d steps=%d dt=%.3e", config.N, P, steps, dt)
    return Ensemble(config, times, obs, energy, dt, steps, u0)


# ---------------------------------------------------------------------------
# Comparison with the homogenised heat flow
# ---------------------------------------------------------------------------

@dataclass
class HomogenizedCoefficient:
    """Effective diffusivity with its provenance."""

    C: float
    c: float
    kappa: float

    @classmethod
    def from_point(cls, point):
        """From an ``ExtrapolatedPoint`` or ``DiffusivityRecord``."""
        C = getattr(point, "C_extrap", None)
        if C is None:
            C = point.C_flux
        return cls(float(C), float(point.c), float(point.kappa))


def heat_evolution(u0, C, t):
    """Exact periodic heat flow ``exp(t C Laplacian) u0`` evaluated spectrally."""
    n = u0.shape[0]
    k = np.fft.fftfreq(n, 1.0 / n)
    k2 = k[:, None] ** 2 + k[None, :] ** 2
    return np.real(np.fft.ifft2(np.fft.fft2(u0) * np.exp(-4.0 * np.pi**2 * C * t * k2)))


def compare_homogenized(ensemble, C_eff, u0, phi, times=None, rtol=1e-9):
    """``E |<u_t - ubar_t, phi>|^2`` over the recorded instants.

    ``ubar`` is the heat flow of ``u0`` with diffusivity ``C_eff.C``. The
    coefficient must come from the same ``(c, kappa)`` as the ensemble.

    Returns
    -------
    times, err : ndarray
    """
    if not isinstance(C_eff, HomogenizedCoefficient):
        raise DataError("C_eff must carry its (c, kappa) provenance")
    for name in ("c", "kappa"):
        a, b = getattr(ensemble, name), getattr(C_eff, name)
        if abs(a - b) > rtol * max(abs(a), abs(b)):
            raise DataError(f"provenance mismatch in {name}: ensemble {a!r} vs C_eff {b!r}")
    phi = np.asarray(phi, dtype=float)
    j = _match_test_function(ensemble, phi)
    t_all = ensemble.times
    sel = np.arange(t_all.size) if times is None else np.array(
        [int(np.argmin(np.abs(t_all - t))) for t in times])
    m = phi.size
    ref = np.array([np.sum(heat_evolution(u0, C_eff.C, t_all[i]) * phi) / m for i in sel])
    dev = ensemble.observables[:, j, sel] - ref[None, :]
    P = dev.shape[0]
    err = np.array([math.fsum(col) / P for col in (dev * dev).T])
    return t_all[sel], err


def _match_test_function(ensemble, phi):
    """Index of ``phi`` among the recorded test functions (by its t=0 observable)."""
    if ensemble.u0 is None:
        return 0
    target = np.sum(ensemble.u0 * phi) / phi.size
    diffs = np.abs(ensemble.observables[0, :, 0] - target)
    j = int(np.argmin(diffs))
    if diffs[j] > 1e-12 * max(1.0, abs(target)):
        raise DataError("phi is not among the recorded test functions")
    return j


def mixing_check(ensemble, C_eff, j=0, lam1=4.0 * np.pi**2):
    """Measured plateau ``eps`` and the bound ``2(eps + exp(-2 C lam1 t)) E||u0||^2``.

    ``eps`` is the smallest value making the bound hold at every recorded
    instant; the bound itself is returned for logging.
    """
    second = np.mean(ensemble.observables[:, j, :] ** 2, axis=0)
    e0 = float(np.mean(ensemble.energy[:, 0]))
    decay = np.exp(-2.0 * C_eff.C * lam1 * ensemble.times)
    eps = float(max(0.0, np.max(second / (2.0 * e0) - decay)))
    bound = 2.0 * (eps + decay) * e0
    log.info("mixing estimate: eps=%.3e", eps)
    return eps, second, bound
