"""
linalg.py — dense float64 products, norms and SPD solves for the block updates
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpotrf

from bcdtrain.errors import DefinitenessError, NonFiniteError, ShapeError

Matrix = np.ndarray

SYMMETRY_RTOL = 1e-12


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Coerce to a C-contiguous 2-D float64 array with finite entries."""
    arr = np.array(data, dtype=np.float64, order="C", ndmin=2)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {arr.ndim}-D input")
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise ShapeError(f"data length {arr.size} does not match {rows}x{cols}")
        arr = arr.reshape(rows, cols)
    return ensure_finite(arr, "as_matrix")


def ensure_finite(A: Matrix, where: str) -> Matrix:
    if not np.all(np.isfinite(A)):
        raise NonFiniteError(where)
    return A


def matmul(A: Matrix, B: Matrix) -> Matrix:
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {A.shape} x {B.shape}")
    return ensure_finite(A @ B, "matmul")


def fro_norm_sq(A: Matrix) -> float:
    # dot of the raveled array: fixed reduction order
    flat = np.ravel(A)
    return float(np.dot(flat, flat))


def op_norm_sq(A: Matrix, iters: int = 20, seed: int = 0) -> float:
    """Power-iteration estimate of ||A||_2^2 (largest eigenvalue of A^T A)."""
    if A.size == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(A.shape[1])
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = A.T @ (A @ x)
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            return 0.0
        est = float(np.dot(x, y))
        x = y / nrm
    return max(est, float(np.dot(x, A.T @ (A @ x))))


def cholesky(A: Matrix) -> Matrix:
    """Lower Cholesky factor; raises DefinitenessError naming the failing pivot."""
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"solve_spd needs a square matrix, got {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if not np.allclose(A, A.T, rtol=0.0, atol=SYMMETRY_RTOL * scale):
        raise ShapeError(f"solve_spd needs a symmetric matrix (shape {A.shape})")
    L, info = dpotrf(A, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        pivot = info - 1
        raise DefinitenessError(pivot, _failing_pivot(A, pivot))
    if info < 0:
        raise ShapeError(f"dpotrf rejected argument {-info}")
    return L


def _failing_pivot(A: Matrix, k: int) -> float:
    """A[k, k] - ||L11^{-1} a||^2: the value elimination reached at pivot k, where
    L11 factors the positive definite leading k x k block and a = A[:k, k]."""
    if k == 0:
        return float(A[0, 0])
    L11, _ = dpotrf(A[:k, :k], lower=1, clean=1, overwrite_a=0)
    l = solve_triangular(L11, A[:k, k], lower=True, check_finite=False)
    return float(A[k, k] - np.dot(l, l))


def solve_spd(A: Matrix, B: Matrix) -> Matrix:
    """Solve A X = B for symmetric positive definite A via Cholesky."""
    if B.ndim != 2 or A.shape[0] != B.shape[0]:
        raise ShapeError(f"solve_spd dimension mismatch: {A.shape} vs {B.shape}")
    L = cholesky(A)
    X = cho_solve((L, True), B, check_finite=False)
    return ensure_finite(np.ascontiguousarray(X), "solve_spd")
