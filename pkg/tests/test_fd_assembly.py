import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_psd_field, trig_field
from patchdiff.errors import DomainError
from patchdiff.fd_assembly import (apply_diff, assemble_T, cell_rhs, centered_diff,
                                   difference_matrices, divergence, split_energy)
from patchdiff.patch_field import Grid2D, SymMatrixField


def spectral_diff(f, axis):
    n = f.shape[0]
    k = np.fft.fftfreq(n, 1.0 / n)
    k[n // 2] = 0.0
    shape = [1, 1]
    shape[axis - 1] = n
    return np.real(np.fft.ifft(2j * np.pi * k.reshape(shape) * np.fft.fft(f, axis=axis - 1),
                               axis=axis - 1))


def exact_operator(A, kappa, u):
    """-div((kappa I + A) grad u) by exact differentiation of trigonometric data."""
    g1, g2 = spectral_diff(u, 1), spectral_diff(u, 2)
    f1 = (kappa + A.a11) * g1 + A.a12 * g2
    f2 = A.a12 * g1 + (kappa + A.a22) * g2
    return -(spectral_diff(f1, 1) + spectral_diff(f2, 2))


def trig_u(n):
    x1, x2 = Grid2D(n).coords()
    return np.sin(2 * np.pi * x1) * np.cos(4 * np.pi * x2) + np.cos(2 * np.pi * (x1 - x2))


def test_consistency_order_two():
    errs = []
    for n in (16, 32, 64, 128):
        A = trig_field(n)
        u = trig_u(n)
        Tu = assemble_T(A, 0.1).apply(u)
        errs.append(np.abs(Tu - exact_operator(A, 0.1, u)).max())
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert orders.min() >= 1.9


def test_one_sided_differences():
    n = 32
    x1, _ = Grid2D(n).coords()
    f = np.sin(2 * np.pi * x1)
    d = 1.0 / n
    fwd = apply_diff(f, 1, "forward")
    assert np.allclose(fwd, (np.sin(2 * np.pi * (x1 + d)) - f) / d, atol=1e-12)
    assert np.allclose(apply_diff(f, 1, "backward"), np.roll(fwd, 1, axis=0))
    assert np.abs(apply_diff(f, 2, "forward")).max() == 0.0
    with pytest.raises(ValueError):
        apply_diff(f, 1, "sideways")


def test_difference_matrices_match_stencils():
    n = 12
    u = np.random.default_rng(0).standard_normal((n, n))
    mats = difference_matrices(n)
    ref = [apply_diff(u, ax, dr).ravel() for dr in ("forward", "backward") for ax in (1, 2)]
    for M, r in zip(mats, ref):
        assert np.allclose(M @ u.ravel(), r, atol=1e-10)


@given(st.integers(8, 24), st.integers(0, 10**6), st.floats(0.0, 2.0))
def test_operator_properties_random_fields(n, seed, kappa):
    A = random_psd_field(n, seed)
    T = assemble_T(A, kappa)
    M = T.matrix
    assert (M - M.T).count_nonzero() == 0
    assert np.abs(M @ np.ones(n * n)).max() <= 1e-12 * M.diagonal().max()
    assert np.all(np.diff(M.indptr) <= 7)
    u = np.random.default_rng(seed + 1).standard_normal((n, n))
    assert T.quadratic(u) >= -1e-12 * np.sum(u * u) * M.diagonal().max()
    # u^T T u / n^2 is the split energy of u with no shift
    assert T.quadratic(u) / (n * n) == pytest.approx(split_energy(A, kappa, 0.0, 0.0, u),
                                                    rel=1e-10, abs=1e-12)


def test_laplacian_spectrum():
    n = 16
    T = assemble_T(SymMatrixField.zeros(n), 1.0)
    w = np.linalg.eigvalsh(T.matrix.toarray())
    k = np.arange(n)
    lam1 = 2 * n**2 * (1 - np.cos(2 * np.pi * k / n))
    ref = np.sort((lam1[:, None] + lam1[None, :]).ravel())
    assert np.allclose(w, ref, atol=1e-9 * ref.max())


def test_negative_kappa_rejected():
    with pytest.raises(DomainError):
        assemble_T(SymMatrixField.zeros(8), -1e-3)


def test_rhs_is_mean_zero_divergence(field_c1_n64):
    A = field_c1_n64
    for i in (1, 2):
        b = cell_rhs(A, i)
        assert abs(b.mean()) < 1e-12 * np.abs(b).max()
    assert np.allclose(cell_rhs(A, 1), centered_diff(A.a11, 1) + centered_diff(A.a12, 2))
    assert np.array_equal(divergence(A.a12, A.a22), cell_rhs(A, 2))


def test_dump_round_trip(tmp_path):
    n = 8
    T = assemble_T(random_psd_field(n, 3), 0.5)
    path = tmp_path / "T.txt"
    T.dump(path)
    data = np.loadtxt(path)
    import scipy.sparse as sp
    M = sp.coo_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))),
                      shape=(n * n, n * n)).tocsr()
    assert (M - T.matrix).count_nonzero() == 0
