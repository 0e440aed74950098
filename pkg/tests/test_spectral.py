"""Jacobi SVD against the LAPACK-backed numpy oracle, plus spectrum
reports, decay CSV framing and the log-log slope fit."""

import numpy as np
import pytest

from lrsa_lab.errors import ContractError, DimensionError, ResourceError
from lrsa_lab.pde import green_kernel_1d_poisson
from lrsa_lab.spectral import (
    KernelReport,
    SIZE_CAP,
    emit_decay_csv,
    fit_decay_slope,
    spectral_report,
    svd,
)


@pytest.mark.parametrize("shape", [(6, 6), (9, 4), (4, 9), (1, 7), (7, 1), (5, 5)])
def test_svd_matches_numpy_oracle(shape):
    rng = np.random.default_rng(hash(shape) % 2**32)
    a = rng.normal(size=shape)
    u, s, v = svd(a)
    s_ref = np.linalg.svd(a, compute_uv=False)
    np.testing.assert_allclose(s, s_ref, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(u @ np.diag(s) @ v.T, a, atol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_svd_orthonormal_factors(seed):
    rng = np.random.default_rng(seed)
    m, n = rng.integers(2, 20, size=2)
    a = rng.normal(size=(m, n))
    u, s, v = svd(a)
    k = min(m, n)
    assert u.shape == (m, k) and v.shape == (n, k)
    np.testing.assert_allclose(u.T @ u, np.eye(k), atol=1e-10)
    np.testing.assert_allclose(v.T @ v, np.eye(k), atol=1e-10)
    assert np.all(np.diff(s) <= 1e-15)  # descending
    assert np.all(s >= 0)


def test_svd_rank_one_outer_product():
    rng = np.random.default_rng(1)
    x = rng.normal(size=12)
    y = rng.normal(size=8)
    a = np.outer(x, y)
    _, s, _ = svd(a)
    assert abs(s[0] - np.linalg.norm(x) * np.linalg.norm(y)) <= 1e-12
    assert np.all(s[1:] <= 1e-12 * s[0])


def test_svd_zero_matrix():
    u, s, v = svd(np.zeros((5, 3)))
    assert np.array_equal(s, np.zeros(3))
    np.testing.assert_allclose(u.T @ u, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(v.T @ v, np.eye(3), atol=1e-10)


def test_svd_rank_deficient_reconstruction():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(10, 3)) @ rng.normal(size=(3, 10))  # rank 3
    u, s, v = svd(a)
    assert np.all(s[3:] <= 1e-12 * s[0])
    np.testing.assert_allclose(u @ np.diag(s) @ v.T, a, atol=1e-10)


def test_svd_validation():
    with pytest.raises(DimensionError):
        svd(np.ones(4))
    with pytest.raises(DimensionError):
        svd(np.ones((0, 3)))
    with pytest.raises(ContractError):
        svd(np.array([[1.0, np.nan]]))
    with pytest.raises(ResourceError):
        svd(np.ones((SIZE_CAP + 1, 2)))


def test_svd_identity_and_diagonal():
    _, s, _ = svd(np.eye(7))
    np.testing.assert_allclose(s, np.ones(7), atol=1e-14)
    d = np.diag([5.0, 3.0, 1.0, 0.5])
    _, s, _ = svd(d)
    np.testing.assert_allclose(s, [5.0, 3.0, 1.0, 0.5], atol=1e-14)


# --------------------------------------------------------------- report


def test_report_rank_errors_non_increasing_and_exact_tail():
    g = green_kernel_1d_poisson(24)
    report = spectral_report(g)
    errs = [report.rank_errors[r] for r in report.rank_grid]
    assert all(a >= b - 1e-15 for a, b in zip(errs, errs[1:]))
    assert errs[-1] <= 1e-12  # full rank reproduces the matrix
    sigma = report.singular_values
    # oracle: relative Frobenius tail at r = 2 computed directly
    manual = np.sqrt((sigma[2:] ** 2).sum() / (sigma**2).sum())
    assert abs(report.rank_errors[2] - manual) <= 1e-14


def test_report_numerical_rank():
    a = np.diag([1.0, 1e-3, 1e-14])
    report = spectral_report(a, tol=1e-10)
    assert report.numerical_rank == 2
    assert spectral_report(np.zeros((3, 3))).numerical_rank == 0


def test_report_custom_grid_validation():
    g = green_kernel_1d_poisson(8)
    report = spectral_report(g, rank_grid=[4, 1, 8])
    assert report.rank_grid == [1, 4, 8]
    with pytest.raises(ContractError):
        spectral_report(g, rank_grid=[0])
    with pytest.raises(ContractError):
        spectral_report(g, rank_grid=[9])


def test_report_as_dict_is_json_serialisable():
    import json

    report = spectral_report(green_kernel_1d_poisson(6))
    payload = json.loads(json.dumps(report.as_dict()))
    assert payload["shape"] == [6, 6]
    assert len(payload["singular_values"]) == 6


# ------------------------------------------------------------------ csv


def test_decay_csv_format_and_roundtrip(tmp_path):
    report = spectral_report(green_kernel_1d_poisson(10), rank_grid=[1, 2, 5])
    path = tmp_path / "decay.csv"
    emit_decay_csv(report, path)
    raw = path.read_bytes()
    assert b"\r" not in raw  # LF only
    lines = raw.decode("utf-8").splitlines()
    assert lines[0] == "k,sigma_k,rank_k_error"
    assert len(lines) == 4
    k, sigma, err = lines[2].split(",")
    assert int(k) == 2
    assert float(sigma) == report.singular_values[1]  # 17 digits round-trip
    assert float(err) == report.rank_errors[2]


def test_decay_csv_empty_grid_header_only(tmp_path):
    report = spectral_report(green_kernel_1d_poisson(4), rank_grid=[])
    path = tmp_path / "decay.csv"
    emit_decay_csv(report, path)
    assert path.read_bytes() == b"k,sigma_k,rank_k_error\n"


# ---------------------------------------------------------------- slope


def test_fit_decay_slope_exact_power_law():
    k = np.arange(1, 40)
    sigma = k ** (-2.0)
    assert abs(fit_decay_slope(sigma, 2, 32) - (-2.0)) <= 1e-12


def test_fit_decay_slope_validation():
    sigma = np.ones(10)
    with pytest.raises(ContractError):
        fit_decay_slope(sigma, 5, 5)
    with pytest.raises(ContractError):
        fit_decay_slope(sigma, 1, 11)
    with pytest.raises(ContractError):
        fit_decay_slope(np.zeros(10), 1, 5)


def test_green_kernel_spectrum_against_analytic():
    # continuum eigenvalues of the Green operator are 1/(pi k)^2; the
    # discrete kernel divided by (n+1) approaches them as n grows
    n = 128
    g = green_kernel_1d_poisson(n) / (n + 1)
    _, s, _ = svd(g)
    for k in (1, 2, 3):
        expected = 1.0 / (np.pi * k) ** 2
        assert abs(s[k - 1] - expected) / expected <= 5e-3
