import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_psd_field
from patchdiff.cell_solver import (DiffusivityRecord, diffusivity_record,
                                   effective_matrix_flux, effective_scalar_variational,
                                   laplacian_ground_eigenvalue, principal_eigenvalue,
                                   scalar_from_matrix, solve_cell, solve_cells)
from patchdiff.errors import DataError, DomainError, SolverError
from patchdiff.fd_assembly import assemble_T, cell_rhs, split_energy
from patchdiff.patch_field import Grid2D, PatchParams, SymMatrixField, assemble_A


@pytest.fixture(scope="module")
def small():
    A = assemble_A(Grid2D(32), PatchParams(1.0))
    return A, assemble_T(A, 0.01)


@pytest.mark.parametrize("precond", ["none", "jacobi", "amg", "lu", "auto"])
def test_matches_dense_pseudo_inverse(small, precond):
    A, T = small
    b = cell_rhs(A, 1)
    x, info = solve_cell(T, b, tol=1e-12, precond=precond)
    ref = np.linalg.pinv(T.matrix.toarray()) @ b.ravel()
    assert abs(x.mean()) < 1e-14
    assert np.abs(x.ravel() - ref).max() <= 1e-9 * np.abs(ref).max()
    assert info["residual"] <= 1e-12


def test_solver_input_errors(small):
    A, T = small
    b = cell_rhs(A, 1)
    with pytest.raises(DomainError):
        solve_cell(assemble_T(A, 0.0), b)
    with pytest.raises(DataError):
        solve_cell(T, b[:-1])
    with pytest.raises(DataError):
        solve_cell(T, np.where(b == b.max(), np.nan, b))
    with pytest.raises(DataError):
        solve_cell(T, b + 1.0)
    with pytest.raises(SolverError) as err:
        solve_cell(T, b, precond="none", max_iter=2)
    assert len(err.value.trace) == 3


def test_zero_rhs_gives_zero(small):
    _, T = small
    x, info = solve_cell(T, np.zeros((32, 32)))
    assert not x.any() and info["iterations"] == 0


def test_constant_field_is_exact():
    n = 16
    A = SymMatrixField(np.full((n, n), 0.7), np.full((n, n), 0.2), np.full((n, n), 0.4))
    rec = diffusivity_record(A, 0.1)
    assert np.allclose(rec.Hbar, [[0.8, 0.2], [0.2, 0.5]], atol=1e-14)


@given(st.integers(8, 20), st.integers(0, 10**6), st.floats(1e-3, 1.0))
def test_bounds_on_random_fields(n, seed, kappa):
    A = random_psd_field(n, seed)
    T = assemble_T(A, kappa)
    sol = solve_cells(A, T, tol=1e-12)
    H, eigs = effective_matrix_flux(A, kappa, sol)
    assert np.abs(H - H.T).max() <= 1e-8 * np.abs(H).max()
    assert eigs[0] >= kappa * (1 - 1e-9)
    # flux equals the minimal split energy, below the trial phi = 0 energy
    assert H[0, 0] == pytest.approx(split_energy(A, kappa, 1.0, 0.0, sol.phi1), rel=1e-8)
    assert H[0, 0] <= kappa + A.a11.mean() + 1e-12
    trial = sol.phi1 + 1e-2 * np.random.default_rng(seed).standard_normal((n, n))
    assert effective_scalar_variational(A, kappa, (1.0, 0.0), trial, "split") >= H[0, 0]


def test_patch_field_isotropy(small):
    A, T = small
    rec = diffusivity_record(A, T.kappa, T=T)
    assert rec.Hbar[0, 0] == pytest.approx(rec.Hbar[1, 1], rel=1e-9)
    assert rec.C_flux >= T.kappa
    assert rec.C_var_e1 == pytest.approx(rec.C_var_e2, rel=1e-8)


def layered(n, kappa=0.1):
    x1, _ = Grid2D(n).coords()
    return SymMatrixField(1 + 0.5 * np.cos(2 * np.pi * x1), np.zeros((n, n)), np.ones((n, n)))


def test_layered_medium_harmonic_mean():
    # across the layers the homogenised coefficient is the harmonic mean of
    # kappa + 1 + cos/2, i.e. sqrt(1.1^2 - 0.5^2); along them the arithmetic mean
    exact = np.sqrt(1.1**2 - 0.25)
    errs = []
    for n in (16, 32, 64, 128):
        rec = diffusivity_record(layered(n), 0.1)
        assert rec.Hbar[1, 1] == pytest.approx(1.1, rel=1e-14)
        errs.append(rec.Hbar[0, 0] - exact)
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert orders.min() >= 1.9
    assert abs(errs[-1]) < 1e-4


def test_richardson_removes_leading_error():
    from patchdiff.sweep import fit_d2

    exact = np.sqrt(1.1**2 - 0.25)
    ns = (32, 64, 128)
    C0, _, _ = fit_d2([1 / n for n in ns], [diffusivity_record(layered(n), 0.1).Hbar[0, 0]
                                             for n in ns])
    assert abs(C0 - exact) < 1e-6


def test_scalar_from_matrix():
    assert scalar_from_matrix([1.0, 1.0 + 1e-5])[0] == pytest.approx(1.0 + 5e-6)
    assert scalar_from_matrix([1.0, 2.0])[0] == 2.0


def test_variational_rejects_non_unit_direction(small):
    A, _ = small
    with pytest.raises(DomainError):
        effective_scalar_variational(A, 0.01, (1.0, 1.0), np.zeros((32, 32)))


@pytest.mark.parametrize("n", [16, 24])
def test_principal_eigenvalue_laplacian(n):
    T = assemble_T(SymMatrixField.zeros(n), 1.0)
    assert principal_eigenvalue(T) == pytest.approx(laplacian_ground_eigenvalue(n), rel=1e-9)


def test_principal_eigenvalue_dense(small):
    A, _ = small
    T = assemble_T(A, 0.05)
    w = np.linalg.eigvalsh(T.matrix.toarray())
    assert principal_eigenvalue(T) == pytest.approx(w[1], rel=1e-8)


def test_record_round_trip(tmp_path, small):
    A, T = small
    rec = diffusivity_record(A, T.kappa, T=T, c=1.0, meta={"n": 32})
    back = DiffusivityRecord.from_dict(json.loads(json.dumps(rec.to_dict())))
    assert back.C_flux == rec.C_flux and np.array_equal(back.Hbar, rec.Hbar)
    rec.write(tmp_path / "r.csv", tmp_path / "r.json")
    row = (tmp_path / "r.csv").read_text().splitlines()[1].split(",")
    assert float(row[DiffusivityRecord.CSV_COLUMNS.index("C_flux")]) == rec.C_flux
    assert "numpy" in json.loads((tmp_path / "r.json").read_text())["versions"]
