import numpy as np
import pytest

import patchdiff.sweep as sweep
from patchdiff.errors import DataError, PreconditionError, SolverError
from patchdiff.sweep import (QUOTED_D_LIST, SweepPlan, default_c_list, default_kappa_list,
                             extrapolate_d, fit_d2, n_from_d, run_point, run_sweep)

SMALL = dict(c_list=(0.6, 1.2), kappa_list=(1e-3, 1e-2), d_list=(1 / 16, 1 / 32))


def test_defaults():
    assert len(default_c_list()) == 18 and default_c_list()[-1] == 1.9
    k = default_kappa_list()
    assert len(k) == 21 and k[0] == pytest.approx(1e-4) and k[-1] == pytest.approx(1e-2)


def test_grid_rounding():
    assert [n_from_d(d) for d in QUOTED_D_LIST] == [100, 450, 599, 800]
    assert n_from_d(1 / 200) == 200
    with pytest.raises(PreconditionError):
        n_from_d(0.3)
    with pytest.raises(PreconditionError):
        n_from_d(0.0535)


def test_plan_validation():
    with pytest.raises(DataError):
        SweepPlan(kappa_list=(0.0,))
    with pytest.raises(DataError):
        SweepPlan(d_list=(1 / 32, 1 / 16))
    with pytest.raises(DataError):
        SweepPlan(c_list=())
    assert SweepPlan(**SMALL).n_list == (16, 32)


def test_fit_d2_exact():
    d = np.array([0.01, 0.005, 0.0025])
    C0, s, res = fit_d2(d, 0.3 + 7.0 * d**2)
    assert C0 == pytest.approx(0.3, rel=1e-13) and s == pytest.approx(7.0, rel=1e-9)
    assert res < 1e-14
    with pytest.raises(DataError):
        fit_d2([0.01, 0.01], [1.0, 2.0])


def test_extrapolate_rejects_mixed_points():
    a = run_point(1.0, 1e-2, 1 / 16)
    b = run_point(1.0, 1e-3, 1 / 32)
    with pytest.raises(DataError):
        extrapolate_d([a, b])
    with pytest.raises(DataError):
        extrapolate_d([])


def test_sweep_cache_and_width_independence(tmp_path):
    r1 = run_sweep(SweepPlan(**SMALL), cache_dir=tmp_path / "cache")
    assert len(r1.points) == 4 and not r1.failures
    assert len(list((tmp_path / "cache").iterdir())) == 8
    r2 = run_sweep(SweepPlan(**SMALL), cache_dir=tmp_path / "cache")
    assert not r2.point_times  # everything came from the cache
    r3 = run_sweep(SweepPlan(**SMALL, workers=2))
    for a, b, c in zip(r1.points, r2.points, r3.points):
        assert a.C_extrap == b.C_extrap == c.C_extrap
        assert a.C_extrap >= a.kappa


def test_failures_are_isolated(monkeypatch):
    real = sweep.run_point

    def flaky(c, kappa, d, *args, **kw):
        if kappa == 1e-3:
            raise SolverError("forced")
        return real(c, kappa, d, *args, **kw)

    monkeypatch.setattr(sweep, "run_point", flaky)
    res = run_sweep(SweepPlan(**SMALL))
    assert len(res.points) == 2 and len(res.failures) == 2
    assert all("forced" in f["error"] for f in res.failures)


def test_all_failing_raises():
    with pytest.raises(SolverError):
        run_sweep(SweepPlan(**SMALL, precond="none", max_iter=1))


def test_solver_error_carries_context():
    with pytest.raises(SolverError) as err:
        run_point(1.0, 1e-3, 1 / 16, max_iter=1, precond="none")
    assert err.value.context["kappa"] == 1e-3
