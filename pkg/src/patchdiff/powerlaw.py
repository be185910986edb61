"""Power-law fits ``nu(kappa) = a kappa^n + q`` of the additional diffusivity.

``a`` is kept positive by fitting ``a' = log a``; ``q`` is free and may come
out negative. The minimiser is a small Levenberg-Marquardt loop with a
central finite-difference Jacobian.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, FitError

log = logging.getLogger(__name__)

KAPPA_MIN = 1e-4
N_STARTS = (0.5, 0.7, 1.0)
MIN_POINTS = 4
JAC_STEP = 1e-6
# the power term is "absent" when it is this small relative to the data
DEGENERATE_REL = 1e-8


@dataclass
class FitResult:
    a: float
    n: float
    q: float
    kappa_star: float
    chi2: float
    converged: bool
    n_points: int
    sigma_n: float = float("nan")
    sigma_q: float = float("nan")
    degenerate: bool = False
    iterations: int = 0

    @property
    def a_prime(self):
        return float(np.log(self.a))

    def predict(self, kappa):
        return self.a * np.asarray(kappa, dtype=float) ** self.n + self.q

    CSV_COLUMNS = ("kappa_star", "a", "n", "q", "sigma_n", "sigma_q", "chi2", "converged")

    def row(self):
        return [self.kappa_star, self.a, self.n, self.q, self.sigma_n, self.sigma_q, self.chi2,
                int(self.converged)]


def _as_points(points):
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or 2 not in arr.shape:
        raise DataError("points must be a sequence of (kappa, nu) pairs")
    if arr.shape[1] != 2:
        arr = arr.T
    kappa, nu = arr[:, 0], arr[:, 1]
    if not (np.all(np.isfinite(kappa)) and np.all(np.isfinite(nu))):
        raise DataError("points contain non-finite values")
    order = np.argsort(kappa, kind="stable")
    return kappa[order], nu[order]


def window(points, kappa_star, kappa_min=KAPPA_MIN):
    """Points with ``kappa_min < kappa <= kappa_star``."""
    kappa, nu = _as_points(points)
    mask = (kappa > kappa_min) & (kappa <= kappa_star)
    return kappa[mask], nu[mask]


def _model(p, kappa):
    # trial steps may overflow; the resulting inf/nan is rejected by the caller
    with np.errstate(over="ignore", invalid="ignore"):
        return np.exp(p[0]) * kappa ** p[1] + p[2]


def _jacobian(fun, p, h_rel=JAC_STEP):
    cols = []
    for i in range(p.size):
        h = h_rel * (1.0 + abs(p[i]))
        e = np.zeros_like(p)
        e[i] = h
        cols.append((fun(p + e) - fun(p - e)) / (2.0 * h))
    return np.column_stack(cols)


def levenberg_marquardt(fun, p0, max_iter=400, xtol=1e-13, ftol=1e-16):
    """Minimise ``|fun(p)|^2``; returns ``(p, chi2, converged, iterations, trace)``."""
    p = np.asarray(p0, dtype=float).copy()
    r = fun(p)
    chi = float(r @ r)
    trace = [chi]
    if not np.isfinite(chi):
        return p, chi, False, 0, trace
    mu = 1e-3
    for it in range(1, max_iter + 1):
        if chi == 0.0:
            return p, chi, True, it - 1, trace
        J = _jacobian(fun, p)
        g = J.T @ r
        JTJ = J.T @ J
        D = np.maximum(np.diag(JTJ), 1e-30 * max(np.diag(JTJ).max(), 1e-300))
        while True:
            try:
                step = np.linalg.solve(JTJ + mu * np.diag(D), -g)
            except np.linalg.LinAlgError:
                step = np.full_like(p, np.nan)
            p_new = p + step
            r_new = fun(p_new) if np.all(np.isfinite(p_new)) else np.full_like(r, np.nan)
            chi_new = float(r_new @ r_new)
            if np.isfinite(chi_new) and chi_new <= chi:
                break
            mu *= 4.0
            if mu > 1e20:
                # no descent direction left: at a (possibly flat) minimum
                return p, chi, True, it, trace
        small_step = np.all(np.abs(step) <= xtol * (np.abs(p) + xtol))
        small_gain = (chi - chi_new) <= ftol * chi
        p, r, chi = p_new, r_new, chi_new
        trace.append(chi)
        mu = max(mu / 3.0, 1e-15)
        if small_step or small_gain:
            return p, chi, True, it, trace
    return p, chi, False, max_iter, trace


def _initial_guess(kappa, nu, n0):
    X = np.column_stack([kappa**n0, np.ones_like(kappa)])
    (a, q), *_ = np.linalg.lstsq(X, nu, rcond=None)
    scale = max(np.abs(nu).max(), 1e-300)
    a = a if a > 0 else 1e-12 * scale / max(kappa.max() ** n0, 1e-300)
    return np.array([np.log(a), n0, q])


def _fit_arrays(kappa, nu, kappa_star, starts=N_STARTS):
    if kappa.size < MIN_POINTS:
        raise DataError(f"need at least {MIN_POINTS} points in the window, got {kappa.size}")
    # residuals in units of the data spread keep the damping well scaled
    scale = float(np.abs(nu).max()) or 1.0

    def fun(p):
        return (_model(p, kappa) - nu) / scale

    best, traces = None, []
    for n0 in starts:
        p, chi, ok, its, trace = levenberg_marquardt(fun, _initial_guess(kappa, nu, n0))
        traces.append((n0, trace))
        if not np.isfinite(chi):
            continue
        # converged candidates first, then lowest chi2
        if best is None or (ok, -chi) > (best[3], -best[1]):
            best = (p, chi, its, ok)
    if best is None:
        raise FitError(f"power-law fit failed from every start {starts}", traces)
    p, chi, its, ok = best
    a = float(np.exp(p[0]))
    degenerate = a * float((kappa ** p[1]).max()) <= DEGENERATE_REL * scale
    return FitResult(a=a, n=float(p[1]), q=float(p[2]), kappa_star=float(kappa_star),
                     chi2=float(chi * scale**2), converged=bool(ok), n_points=int(kappa.size),
                     degenerate=bool(degenerate), iterations=its)


def fit_powerlaw(points, kappa_star, kappa_min=KAPPA_MIN, starts=N_STARTS):
    """Fit ``a kappa^n + q`` on ``kappa_min < kappa <= kappa_star``.

    Parameters
    ----------
    points : array-like of (kappa, nu) pairs
    kappa_star : float
        Upper end of the fit window.

    Returns
    -------
    FitResult
        Lowest-chi2 result over the starting exponents. ``degenerate`` is set
        when the power term has collapsed (``a -> 0``), e.g. for constant data.
    """
    kappa, nu = window(points, kappa_star, kappa_min)
    res = _fit_arrays(kappa, nu, kappa_star, starts)
    if not res.converged:
        log.warning("power-law fit at kappa*=%g stopped before convergence", kappa_star)
    if res.degenerate:
        log.warning("degenerate power-law fit at kappa*=%g: a=%.3g", kappa_star, res.a)
    return res


def jackknife(points, kappa_star, drop_fraction=0.95, n_resamples=100, seed=0,
              kappa_min=KAPPA_MIN):
    """Delete-d jackknife over random subsets of the fit window.

    Each resample keeps ``round((1 - drop_fraction) * m)`` of the ``m`` window
    points, drawn without replacement from its own seeded stream. With
    ``d = m - keep``, the bias-corrected estimate is
    ``theta - (m-d)/d (mean_s theta_s - theta)`` and the variance
    ``(m-d)/d * mean_s (theta_s - mean theta_s)^2``.

    Returns
    -------
    n_est, q_est, sigma_n, sigma_q : float
    """
    if not 0.0 < drop_fraction < 1.0:
        raise ConfigurationError(f"drop_fraction must lie in (0, 1), got {drop_fraction!r}")
    kappa, nu = window(points, kappa_star, kappa_min)
    m = kappa.size
    keep = int(round((1.0 - drop_fraction) * m))
    if keep < MIN_POINTS:
        raise ConfigurationError(
            f"dropping {drop_fraction:.0%} of {m} points leaves {keep} < {MIN_POINTS}")
    full = _fit_arrays(kappa, nu, kappa_star)
    d = m - keep
    if d == 0:
        return full.n, full.q, 0.0, 0.0
    streams = np.random.SeedSequence(seed).spawn(n_resamples)
    thetas = np.empty((n_resamples, 2))
    for s, ss in enumerate(streams):
        idx = np.sort(np.random.default_rng(ss).choice(m, size=keep, replace=False))
        sub = _fit_arrays(kappa[idx], nu[idx], kappa_star)
        thetas[s] = sub.n, sub.q
    theta_hat = np.array([full.n, full.q])
    mean = thetas.mean(axis=0)
    factor = (m - d) / d
    est = theta_hat - factor * (mean - theta_hat)
    var = factor * np.mean((thetas - mean) ** 2, axis=0)
    sig = np.sqrt(var)
    return float(est[0]), float(est[1]), float(sig[0]), float(sig[1])


@dataclass
class ScanEntry:
    kappa_star: float
    result: FitResult = None
    error: str = ""
    drift: bool = False
    extra: dict = field(default_factory=dict)


def stability_scan(points, kappa_star_list, drop_fraction=None, n_resamples=100, seed=0,
                   kappa_min=KAPPA_MIN):
    """One fit per window end; failed windows are recorded, not raised.

    With ``drop_fraction`` set, each window also gets jackknife estimates and
    uncertainties, and ``drift`` marks windows whose exponent moved by more than
    ``2 sigma_n`` from the previous successful window.
    """
    out = []
    prev = None
    for ks in kappa_star_list:
        entry = ScanEntry(float(ks))
        try:
            res = fit_powerlaw(points, ks, kappa_min)
            if drop_fraction is not None:
                n_j, q_j, sn, sq = jackknife(points, ks, drop_fraction, n_resamples, seed,
                                             kappa_min)
                res.sigma_n, res.sigma_q = sn, sq
                entry.extra = {"n_jack": n_j, "q_jack": q_j}
            entry.result = res
        except (DataError, FitError, ConfigurationError) as exc:
            entry.error = f"{type(exc).__name__}: {exc}"
            log.info("window kappa*=%g skipped: %s", ks, exc)
            out.append(entry)
            continue
        if prev is not None and np.isfinite(res.sigma_n):
            entry.drift = abs(res.n - prev.n) > 2.0 * max(res.sigma_n, prev.sigma_n)
        prev = res
        out.append(entry)
    return out
