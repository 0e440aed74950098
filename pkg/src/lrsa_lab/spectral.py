"""Singular value analysis of dense kernels.

The decomposition is a one-sided Jacobi SVD: plane rotations repeatedly
orthogonalise column pairs of a working copy until every normalised
off-diagonal Gram entry falls below 1e-14, capped at 30 sweeps. That is
slower than a blocked LAPACK driver but transparent, dependency-free and
accurate at desk scale (matrices up to 1024 x 1024).

Reports summarise the spectrum: rank-r truncation errors in relative
Frobenius norm, sqrt(sum_{k>r} s_k^2 / sum_k s_k^2), and the numerical
rank #{s_k > tol * s_1}. The CSV emitter writes "k,sigma_k,rank_k_error"
rows with 17 significant digits, UTF-8 encoded with LF line endings.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ConvergenceError, DimensionError, ResourceError

JACOBI_SWEEP_CAP = 30
JACOBI_TOL = 1e-14
SIZE_CAP = 1024


def _one_sided_jacobi(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Factor a (m >= n) as u * diag(s) * v^T with orthonormal u, v."""
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    for _ in range(JACOBI_SWEEP_CAP):
        worst = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                wp = w[:, p]
                wq = w[:, q]
                app = float(wp @ wp)
                aqq = float(wq @ wq)
                apq = float(wp @ wq)
                denom = np.sqrt(app * aqq)
                if denom == 0.0:
                    continue
                ratio = abs(apq) / denom
                if ratio > worst:
                    worst = ratio
                if ratio <= JACOBI_TOL:
                    continue
                zeta = (aqq - app) / (2.0 * apq)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * wp - s * wq
                new_q = s * wp + c * wq
                w[:, p], w[:, q] = new_p, new_q
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if worst <= JACOBI_TOL:
            break
    else:
        raise ConvergenceError(
            f"jacobi svd did not converge within {JACOBI_SWEEP_CAP} sweeps"
        )
    sigma = np.linalg.norm(w, axis=0)
    order = np.argsort(sigma)[::-1]
    sigma = sigma[order]
    w = w[:, order]
    v = v[:, order]
    u = np.zeros((m, n))
    scale = sigma[0] if sigma[0] > 0 else 1.0
    fill_from = n
    for j in range(n):
        if sigma[j] > scale * 1e-15 * max(m, n):
            u[:, j] = w[:, j] / sigma[j]
        else:
            fill_from = min(fill_from, j)
    # complete zero-sigma columns to an orthonormal set
    for j in range(fill_from, n):
        for cand in range(m):
            e = np.zeros(m)
            e[cand] = 1.0
            e -= u @ (u.T @ e)
            norm = np.linalg.norm(e)
            if norm > 1e-8:
                u[:, j] = e / norm
                break
    return u, sigma, v


def svd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi SVD of a dense matrix; returns (u, s, v) with
    a = u @ diag(s) @ v.T and singular values descending."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"svd expects a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("svd input has non-finite entries")
    m, n = a.shape
    if m < 1 or n < 1:
        raise DimensionError(f"svd needs a non-empty matrix, got {a.shape}")
    if max(m, n) > SIZE_CAP:
        raise ResourceError(f"svd size cap is {SIZE_CAP}, got {a.shape}")
    if m >= n:
        return _one_sided_jacobi(a)
    v, s, u = _one_sided_jacobi(a.T)
    return u, s, v


@dataclass
class KernelReport:
    """Spectrum summary of one kernel matrix."""

    shape: tuple[int, int]
    singular_values: np.ndarray
    rank_grid: list[int]
    rank_errors: dict[int, float]
    numerical_rank: int
    tol: float

    def as_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "singular_values": self.singular_values.tolist(),
            "rank_grid": list(self.rank_grid),
            "rank_errors": {str(k): v for k, v in self.rank_errors.items()},
            "numerical_rank": self.numerical_rank,
            "tol": self.tol,
        }


def spectral_report(
    a: np.ndarray, tol: float = 1e-10, rank_grid: list[int] | None = None
) -> KernelReport:
    """Singular values plus truncation errors on a rank grid.

    The default grid is every rank 1..min(m, n). Errors are relative
    Frobenius tail norms, non-increasing in r and exactly 0 at full rank.
    The numerical rank counts singular values above tol * s_1.
    """
    a = np.asarray(a, dtype=np.float64)
    _, sigma, _ = svd(a)
    total = float((sigma**2).sum())
    r_full = sigma.size
    if rank_grid is None:
        rank_grid = list(range(1, r_full + 1))
    else:
        rank_grid = sorted(int(r) for r in rank_grid)
        for r in rank_grid:
            if not (1 <= r <= r_full):
                raise ContractError(f"rank {r} outside [1, {r_full}]")
    tail = np.concatenate([np.cumsum((sigma**2)[::-1])[::-1], [0.0]])
    errors = {}
    for r in rank_grid:
        errors[r] = float(np.sqrt(tail[r] / total)) if total > 0 else 0.0
    if sigma[0] > 0:
        numerical_rank = int((sigma > tol * sigma[0]).sum())
    else:
        numerical_rank = 0
    return KernelReport(
        shape=a.shape,
        singular_values=sigma,
        rank_grid=rank_grid,
        rank_errors=errors,
        numerical_rank=numerical_rank,
        tol=tol,
    )


def emit_decay_csv(report: KernelReport, path) -> None:
    """Write "k,sigma_k,rank_k_error" rows for the report's rank grid.

    Values carry 17 significant digits so float64 round-trips exactly;
    the file is UTF-8 with LF endings. An empty grid gives a header-only
    file.
    """
    lines = ["k,sigma_k,rank_k_error"]
    for k in report.rank_grid:
        sigma_k = report.singular_values[k - 1]
        lines.append(f"{k},{sigma_k:.17g},{report.rank_errors[k]:.17g}")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def fit_decay_slope(sigma: np.ndarray, k_lo: int, k_hi: int) -> float:
    """Least-squares slope of log sigma_k against log k over k in [k_lo, k_hi]."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if not (1 <= k_lo < k_hi <= sigma.size):
        raise ContractError(
            f"slope window [{k_lo}, {k_hi}] outside spectrum of length {sigma.size}"
        )
    k = np.arange(k_lo, k_hi + 1)
    vals = sigma[k_lo - 1 : k_hi]
    if np.any(vals <= 0):
        raise ContractError("slope fit needs strictly positive singular values")
    return float(np.polyfit(np.log(k), np.log(vals), 1)[0])
