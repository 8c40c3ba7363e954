"""Dense float64 kernels: products, Cholesky factorization, SPD solves, least squares.

Matrices are 2-D float64 numpy arrays in row-major order. Every exported
operation validates shapes on entry and rejects non-finite values, so a NaN
produced anywhere upstream fails fast instead of propagating into a factor.
Factorizations go through LAPACK (dpotrf/dpotrs/dpotri); the failing pivot
index is surfaced on non-positive-definite input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

from .errors import FactorizationError, NumericError, ShapeError, SingularityError

# Relative tolerance for the symmetry check on Cholesky input.
SYMMETRY_TOL = 1e-9


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D C-contiguous float64 array, rejecting non-finite entries."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def _check_result(arr: np.ndarray, context: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite result in {context}")
    return arr


def frobenius_sq(a) -> float:
    """Squared Frobenius norm, accumulated in float64."""
    arr = np.asarray(a, dtype=np.float64)
    flat = arr.ravel()
    return float(np.dot(flat, flat))


def matmul(a, b) -> np.ndarray:
    """Product a @ b with shape and finiteness validation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not chain: {a.shape} @ {b.shape}")
    return _check_result(a @ b, "matmul")


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with L @ L.T reconstructing the input."""

    dim: int
    lower: np.ndarray


def cholesky(h) -> CholeskyFactor:
    """Factor a symmetric positive definite matrix.

    Raises FactorizationError carrying the failing pivot index when the input
    is not positive definite, and ArgumentError-family errors on shape or
    symmetry violations.
    """
    h = as_matrix(h, "h")
    n, m = h.shape
    if n != m:
        raise ShapeError(f"cholesky needs a square matrix, got {h.shape}")
    if n > 0:
        scale = max(1.0, float(np.max(np.abs(h))))
        asym = float(np.max(np.abs(h - h.T)))
        if asym > SYMMETRY_TOL * scale:
            raise ShapeError(f"cholesky input is not symmetric (max asymmetry {asym:.3e})")
    c, info = lapack.dpotrf(h, lower=1, clean=1)
    if info > 0:
        raise FactorizationError(
            f"matrix is not positive definite (pivot {info - 1})", pivot=info - 1
        )
    if info < 0:
        raise ValueError(f"invalid argument {-info} to dpotrf")
    return CholeskyFactor(dim=n, lower=_check_result(c, "cholesky"))


def spd_solve(factor: CholeskyFactor, rhs) -> np.ndarray:
    """Solve H x = rhs given the Cholesky factor of H. rhs is (dim x m)."""
    rhs = as_matrix(rhs, "rhs")
    if rhs.shape[0] != factor.dim:
        raise ShapeError(f"rhs has {rhs.shape[0]} rows, factor dim is {factor.dim}")
    if rhs.shape[1] == 0 or factor.dim == 0:
        return np.zeros(rhs.shape, dtype=np.float64)
    x, info = lapack.dpotrs(factor.lower, rhs, lower=1)
    if info != 0:
        raise ValueError(f"invalid argument {-info} to dpotrs")
    return _check_result(np.ascontiguousarray(x), "spd_solve")


def spd_inverse(factor: CholeskyFactor) -> np.ndarray:
    """Explicit inverse from a Cholesky factor (symmetrized)."""
    if factor.dim == 0:
        return np.zeros((0, 0), dtype=np.float64)
    inv, info = lapack.dpotri(factor.lower, lower=1)
    if info != 0:
        raise FactorizationError(f"dpotri failed with info={info}", pivot=None)
    lower = np.tril(inv)
    full = lower + np.tril(inv, -1).T
    return _check_result(np.ascontiguousarray(full), "spd_inverse")


def least_squares(x, target) -> np.ndarray:
    """Minimize ||target - x @ B.T||_F via the normal equations.

    Args:
        x: design matrix, (n x p).
        target: right-hand side, (n x m).

    Returns:
        B with shape (m x p), so x @ B.T approximates target.
    """
    x = as_matrix(x, "x")
    target = as_matrix(target, "target")
    if x.shape[0] != target.shape[0]:
        raise ShapeError(f"row mismatch: x has {x.shape[0]}, target has {target.shape[0]}")
    gram = x.T @ x
    try:
        factor = cholesky(gram)
    except FactorizationError as exc:
        raise SingularityError(
            f"normal equations are rank deficient (pivot {exc.pivot})", pivot=exc.pivot
        ) from exc
    bt = spd_solve(factor, x.T @ target)
    return np.ascontiguousarray(bt.T)
