import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import least_squares

from patchdiff.errors import ConfigurationError, DataError
from patchdiff.powerlaw import (KAPPA_MIN, fit_powerlaw, jackknife, levenberg_marquardt,
                                stability_scan, window)

KAPPA = np.logspace(-4, -2, 21)


def synthetic(a=2.0, n=0.7, q=0.1, kappa=KAPPA, noise=0.0, seed=0):
    nu = a * kappa**n + q
    if noise:
        nu = nu + noise * np.random.default_rng(seed).standard_normal(kappa.size)
    return np.column_stack([kappa, nu])


def test_exact_recovery():
    r = fit_powerlaw(synthetic(), 1e-2)
    assert r.a == pytest.approx(2.0, rel=1e-6)
    assert r.n == pytest.approx(0.7, rel=1e-6)
    assert r.q == pytest.approx(0.1, rel=1e-6)
    assert r.n_points == 20  # kappa = 1e-4 itself is outside the open window
    assert r.a_prime == pytest.approx(np.log(2.0), rel=1e-6)


@given(st.floats(0.2, 5.0), st.floats(0.4, 1.3), st.floats(-0.05, 0.3))
def test_recovery_property(a, n, q):
    r = fit_powerlaw(synthetic(a, n, q), 1e-2)
    assert r.n == pytest.approx(n, rel=1e-5)
    assert r.predict(KAPPA) == pytest.approx(a * KAPPA**n + q, rel=1e-7, abs=1e-10)


def test_against_scipy_least_squares():
    pts = synthetic(noise=2e-4, seed=3)
    k, nu = window(pts, 5e-3)
    ref = least_squares(lambda p: p[0] * k ** p[1] + p[2] - nu, x0=[1.0, 0.8, 0.0],
                        xtol=1e-15, ftol=1e-15, gtol=1e-15)
    r = fit_powerlaw(pts, 5e-3)
    assert [r.a, r.n, r.q] == pytest.approx(ref.x, rel=1e-5)


def test_lm_on_rosenbrock():
    fun = lambda p: np.array([10 * (p[1] - p[0] ** 2), 1 - p[0]])
    p, chi, ok, *_ = levenberg_marquardt(fun, [-1.2, 1.0])
    assert ok and np.allclose(p, [1.0, 1.0], atol=1e-6)


def test_degenerate_constant_data():
    pts = np.column_stack([KAPPA, np.full(KAPPA.size, 0.3)])
    r = fit_powerlaw(pts, 1e-2)
    assert r.degenerate
    assert r.predict(5e-3) == pytest.approx(0.3, rel=1e-8)


def test_window_bounds():
    k, _ = window(synthetic(), 2e-3)
    assert k.min() > KAPPA_MIN and k.max() <= 2e-3


def test_bad_inputs():
    with pytest.raises(DataError):
        fit_powerlaw(synthetic(), 2e-4)
    with pytest.raises(DataError):
        fit_powerlaw(np.array([[1e-3, np.nan]] * 6), 1e-2)
    with pytest.raises(ConfigurationError):
        jackknife(synthetic(), 1e-2, drop_fraction=0.95)
    with pytest.raises(ConfigurationError):
        jackknife(synthetic(), 1e-2, drop_fraction=1.0)


def test_jackknife_exact_data_has_no_spread():
    n, q, sn, sq = jackknife(synthetic(), 1e-2, drop_fraction=0.3, n_resamples=20)
    assert n == pytest.approx(0.7, rel=1e-6) and q == pytest.approx(0.1, rel=1e-5)
    assert sn < 1e-6 and sq < 1e-6


def test_jackknife_seeded():
    pts = synthetic(noise=1e-3, seed=1)
    a = jackknife(pts, 1e-2, 0.3, 30, seed=7)
    b = jackknife(pts, 1e-2, 0.3, 30, seed=7)
    c = jackknife(pts, 1e-2, 0.3, 30, seed=8)
    assert a == b and a != c


def test_stability_scan_keeps_failures():
    scan = stability_scan(synthetic(), [2e-4, 2e-3, 1e-2], drop_fraction=0.25, n_resamples=10)
    assert scan[0].result is None and "DataError" in scan[0].error
    assert scan[1].result is not None and "n_jack" in scan[1].extra
    assert scan[2].result.n == pytest.approx(0.7, rel=1e-6)
