import numpy as np
import pytest

from patchdiff.errors import ConfigurationError, DataError, PreconditionError
from patchdiff.fd_assembly import centered_diff
from patchdiff.patch_field import Grid2D, PatchParams, assemble_A, profile_phi
from patchdiff.spde import (BatchStepper, HomogenizedCoefficient, NoiseConfig,
                            build_patch_vectors, compare_homogenized, drift_energy,
                            heat_evolution, mixing_check, noise_energy, quadratic_form_AN,
                            simulate, step_ito, stream_profile)


@pytest.fixture(scope="module")
def patches():
    return build_patch_vectors(4, Grid2D(32), PatchParams(1.0), mode="stream")


@pytest.mark.parametrize("N", [2, 4])
def test_sampled_covariance_identity(N):
    g = Grid2D(64)
    p = PatchParams(1.0)
    ps = build_patch_vectors(N, g, p, mode="sampled")
    A = assemble_A(g, p, N)
    assert np.abs(ps.A_N.a12 - A.a12).max() <= 1e-13 * A.max_abs()
    assert np.abs(ps.A_N.a11 - A.a11).max() <= 1e-13 * A.max_abs()


def test_stream_mode_is_divergence_free(patches):
    div = [centered_diff(s[0], 1) + centered_diff(s[1], 2) for s in patches.sigma]
    assert max(np.abs(d).max() for d in div) <= 1e-9 * np.abs(patches.sigma).max()


def test_stream_profile_derivative():
    p = PatchParams(1.0)
    f = stream_profile(p)
    r = np.linspace(0.1, 0.9, 9)
    h = 1e-3  # wider than the interpolation table spacing
    assert (f(r + h) - f(r - h)) / (2 * h) == pytest.approx(profile_phi(r, p) / p.norm, rel=1e-3)
    assert f(1.0) == 0.0 and f(2.0) == 0.0


def test_energy_cancellation(patches):
    rng = np.random.default_rng(0)
    for _ in range(10):
        u = rng.standard_normal((32, 32))
        assert noise_energy(u, patches) == pytest.approx(drift_energy(u, patches), rel=1e-12)


def test_quadratic_form(patches):
    v = np.random.default_rng(1).standard_normal((2, 32, 32))
    direct = sum(np.mean(s[0] * v[0] + s[1] * v[1]) ** 2 for s in patches.sigma)
    assert quadratic_form_AN(v, patches) == pytest.approx(direct, rel=1e-12)


def test_grid_must_be_divisible():
    with pytest.raises(PreconditionError):
        build_patch_vectors(3, Grid2D(32), PatchParams(1.0))
    with pytest.raises(ValueError):
        build_patch_vectors(2, Grid2D(32), PatchParams(1.0), mode="other")


def test_batch_step_matches_reference(patches):
    kappa = 0.05
    dt = 0.5 * patches.cfl_dt(kappa)
    rng = np.random.default_rng(2)
    U = rng.standard_normal((32 * 32, 3))
    xi = rng.standard_normal((patches.count, 3))
    out = BatchStepper(patches, kappa, dt).step(np.ascontiguousarray(U), xi)
    for p in range(3):
        ref = step_ito(U[:, p].reshape(32, 32), dt, kappa, patches, xi=xi[:, p])
        assert np.abs(out[:, p] - ref.ravel()).max() <= 1e-13 * np.abs(ref).max()


def test_cfl_violation(patches):
    with pytest.raises(ConfigurationError):
        step_ito(np.zeros((32, 32)), 10 * patches.cfl_dt(0.05), 0.05, patches)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        NoiseConfig(N=1)
    with pytest.raises(ConfigurationError):
        NoiseConfig(N=2, dt=-1.0)
    with pytest.raises(ConfigurationError):
        NoiseConfig(N=2, mode="x")


def small_run(seed=0, noise=True, paths=4):
    cfg = NoiseConfig(N=2, seed=seed, paths=paths, n=32, noise=noise)
    x1, _ = Grid2D(32).coords()
    u0 = np.cos(2 * np.pi * x1)
    return u0, simulate(u0, 0.01, cfg, [u0], n_records=5)


def test_simulation_is_deterministic():
    _, a = small_run(3)
    _, b = small_run(3)
    _, c = small_run(4)
    assert np.array_equal(a.observables, b.observables)
    assert not np.array_equal(a.observables, c.observables)


def test_noise_free_run_is_deterministic_heat_flow():
    u0, ens = small_run(noise=False, paths=2)
    assert np.array_equal(ens.observables[0], ens.observables[1])
    # energy decreases monotonically without noise
    assert np.all(np.diff(ens.energy[0]) < 0)


def test_energy_balance_in_mean():
    # Ito isometry: noise injects exactly what the corrector removes, so only
    # kappa dissipates; in the mean E|u_t|^2 decays at the molecular rate
    u0, ens = small_run(paths=64)
    e = ens.mean_energy()
    assert e[-1] < e[0]


def test_heat_evolution_exact_mode():
    x1, x2 = Grid2D(32).coords()
    u0 = np.cos(2 * np.pi * x1) * np.sin(4 * np.pi * x2)
    assert np.allclose(heat_evolution(u0, 0.2, 0.1), u0 * np.exp(-20 * np.pi**2 * 0.2 * 0.1),
                       atol=1e-14)


def test_comparison_provenance():
    u0, ens = small_run()
    with pytest.raises(DataError):
        compare_homogenized(ens, 0.2, u0, u0)
    with pytest.raises(DataError):
        compare_homogenized(ens, HomogenizedCoefficient(0.2, 0.5, 0.05), u0, u0)
    with pytest.raises(DataError):
        compare_homogenized(ens, HomogenizedCoefficient(0.2, 1.0, 0.05), u0, 2 * u0 + 1)
    t, err = compare_homogenized(ens, HomogenizedCoefficient(0.2, 1.0, 0.05), u0, u0)
    assert err[0] == pytest.approx(0.0, abs=1e-28) and t.size == 5
    eps, second, bound = mixing_check(ens, HomogenizedCoefficient(0.2, 1.0, 0.05))
    assert np.all(second <= bound * (1 + 1e-12))
