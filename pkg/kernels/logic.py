"""
Small dense-matrix primitives the square-root filters are built from.

Covariances are carried as upper-triangular factors U with Sigma = U^T U.
Every function here is pure and works on dimensions known only at run time.
"""
import logging

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from core.exceptions import TrackingError

logger = logging.getLogger(__name__)

# Upper-triangular Cholesky factor, Sigma = U^T U.
UpperCholesky = NDArray[np.float64]

DOWNDATE_TOL = 1e-12
SINGULAR_TOL = 1e-14


class KernelError(TrackingError):
    pass


class NonFiniteInput(KernelError, ValueError):
    pass


class SingularTriangular(KernelError):
    pass


class IndefiniteDowndate(KernelError):
    pass


def _as_matrix(a, name):
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"{name} contains non-finite entries")
    return arr


def _check_diagonal(T, name):
    diag = np.abs(np.diag(T))
    scale = max(1.0, float(diag.max())) if diag.size else 1.0
    if diag.size and float(diag.min()) <= SINGULAR_TOL * scale:
        raise SingularTriangular(f"{name} has a zero diagonal entry (min |d| = {diag.min():.3e})")


def qr_factor(stack) -> UpperCholesky:
    """
    Upper triangular factor R of the QR factorization of `stack` (m x n, m >= n),
    so that R^T R = stack^T stack. Rows are sign-normalised to a non-negative diagonal.
    A rank-deficient stack gives a zero diagonal entry; callers decide if that is fatal.
    """
    A = _as_matrix(stack, "stack")
    m, n = A.shape
    if m < n:
        raise ValueError(f"qr_factor needs at least as many rows as columns, got {m} x {n}")

    R = scipy.linalg.qr(A, mode='r', check_finite=False)[0][:n, :]
    R = np.triu(R)
    signs = np.where(np.diag(R) < 0.0, -1.0, 1.0)
    return R * signs[:, None]


def chol_downdate(U, cols) -> UpperCholesky:
    """
    Successive rank-1 downdates: returns V with V^T V = U^T U - cols cols^T,
    where `cols` holds the p downdate vectors as columns.
    """
    V = np.array(_as_matrix(U, "U"), copy=True)
    n = V.shape[0]
    X = np.asarray(cols, dtype=float)
    if X.size == 0:
        return V
    X = X.reshape(n, -1)

    for j in range(X.shape[1]):
        x = X[:, j].copy()
        for k in range(n):
            d = V[k, k]
            if d <= 0.0:
                raise IndefiniteDowndate(f"factor has non-positive pivot {d:.3e} at row {k}")
            r2 = d * d - x[k] * x[k]
            if r2 < -DOWNDATE_TOL * d * d:
                raise IndefiniteDowndate(
                    f"downdate {j} is indefinite at row {k} (d^2 - x^2 = {r2:.3e})"
                )
            # Roundoff-level negatives clamp to zero, which still leaves a singular factor.
            r = np.sqrt(max(r2, 0.0))
            if r == 0.0:
                raise IndefiniteDowndate(f"downdate {j} leaves a singular factor at row {k}")
            c = r / d
            s = x[k] / d
            V[k, k] = r
            if k + 1 < n:
                V[k, k + 1:] = (V[k, k + 1:] - s * x[k + 1:]) / c
                x[k + 1:] = c * x[k + 1:] - s * V[k, k + 1:]
    return V


def solve_lower(L, b):
    """Forward substitution: returns y with L y = b."""
    L = _as_matrix(L, "L")
    if L.shape[0] != L.shape[1]:
        raise ValueError(f"L must be square, got {L.shape}")
    _check_diagonal(L, "L")
    return scipy.linalg.solve_triangular(L, np.asarray(b, dtype=float), lower=True, check_finite=False)


def solve_upper_multi(Uz, B):
    """
    Returns T with T Uz = B, one back-substitution per row of B.
    """
    Uz = _as_matrix(Uz, "Uz")
    _check_diagonal(Uz, "Uz")
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.shape[1] != Uz.shape[0]:
        raise ValueError(f"B has {B.shape[1]} columns, Uz is {Uz.shape[0]} x {Uz.shape[0]}")
    # T Uz = B  <=>  Uz^T T^T = B^T
    return scipy.linalg.solve_triangular(Uz, B.T, trans='T', lower=False, check_finite=False).T


def cov_to_factor(cov) -> UpperCholesky:
    """
    Upper Cholesky factor of a covariance held densely. Symmetrizes first; if the
    matrix has drifted indefinite, clips its spectrum at a tiny positive floor.
    """
    S = _as_matrix(cov, "cov")
    S = 0.5 * (S + S.T)
    try:
        return scipy.linalg.cholesky(S, lower=False, check_finite=False)
    except np.linalg.LinAlgError:
        w, Q = np.linalg.eigh(S)
        floor = max(float(w.max()), 1.0) * 1e-12
        logger.warning(f"Covariance not positive definite (min eig {w.min():.3e}); clipping spectrum")
        w = np.clip(w, floor, None)
        return qr_factor(np.sqrt(w)[:, None] * Q.T)
