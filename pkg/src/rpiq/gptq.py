"""Hessian-guided greedy column quantization with error compensation.

Columns are quantized left to right. After column j is rounded to its grid,
the rounding error is propagated into every not-yet-quantized column through
row j of the upper Cholesky factor of the damped inverse Hessian; those rows
carry exactly the sequential least-squares compensation coefficients, so each
column update is the optimal adjustment given everything already quantized.
With a diagonal (or isotropic) Hessian the propagation vanishes and the
result is plain round-to-nearest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationSnapshot
from .errors import CalibrationError, FactorizationError, NumericError, ShapeError
from .grid import QuantGrid, dequantize_columns
from .linalg import as_matrix, cholesky, frobenius_sq, spd_inverse


@dataclass(frozen=True)
class Stage1Result:
    """Quantized initialization: on-grid weights, their codes, and the fit error."""

    w_init: np.ndarray      # (rows, cols) float64, exactly dequantize(codes, grid)
    codes: np.ndarray       # (rows, cols) int64
    grid: QuantGrid
    recon_error: float      # ||y_orig - x_orig @ w_init.T||_F^2
    work_bytes: int         # transient array bytes the pass held


def quantize_layer_stage1(w_fp, snapshot: CalibrationSnapshot, grid: QuantGrid) -> Stage1Result:
    """Quantize one layer against the snapshot's damped Hessian.

    Args:
        w_fp: full-precision weights, (c_out x c_in).
        snapshot: calibration state whose h_damped has dim c_in.
        grid: grids fitted on w_fp; frozen during the pass.

    Returns:
        Stage1Result whose w_init is bit-exactly reproducible from
        (codes, grid).
    """
    w = as_matrix(w_fp, "w_fp").copy()
    rows, cols = w.shape
    if cols != snapshot.dim:
        raise ShapeError(f"weights have {cols} columns, snapshot dim is {snapshot.dim}")
    if (rows, cols) != (grid.rows, grid.cols):
        raise ShapeError(f"grid shape ({grid.rows}, {grid.cols}) != weights {w.shape}")

    try:
        factor = cholesky(snapshot.h_damped)
        hinv = spd_inverse(factor)
        # Upper factor of H^-1; row j spans the compensation coefficients for
        # everything right of column j.
        u = cholesky(hinv).lower.T
    except FactorizationError as exc:
        raise CalibrationError(
            f"damped Hessian is not positive definite (pivot {exc.pivot}); "
            "increase percdamp"
        ) from exc

    codes = np.empty((rows, cols), dtype=np.int64)
    levels = grid.levels
    for j in range(cols):
        s, z = grid.column_params(j, j + 1)
        s = s[:, 0]
        z = z[:, 0]
        col = w[:, j]
        code = np.clip(np.rint(col / s) + z, 0, levels)
        codes[:, j] = code
        err = col - s * (code - z)
        if not np.all(np.isfinite(err)):
            raise NumericError(f"non-finite rounding error at column {j}")
        if j + 1 < cols:
            w[:, j + 1:] -= np.outer(err / u[j, j], u[j, j + 1:])

    w_init = dequantize_columns(codes, grid)
    resid = snapshot.y_orig - snapshot.x_orig @ w_init.T
    work = int(w.nbytes + hinv.nbytes + u.nbytes + codes.nbytes + w_init.nbytes)
    return Stage1Result(
        w_init=w_init, codes=codes, grid=grid,
        recon_error=frobenius_sq(resid), work_bytes=work,
    )


def rtn_baseline(w_fp, grid: QuantGrid) -> np.ndarray:
    """Round-to-nearest baseline: independent grid rounding of every entry."""
    w = as_matrix(w_fp, "w_fp")
    if w.shape != (grid.rows, grid.cols):
        raise ShapeError(f"grid shape ({grid.rows}, {grid.cols}) != weights {w.shape}")
    s, z = grid.column_params(0, grid.cols)
    codes = np.clip(np.rint(w / s) + z, 0, grid.levels)
    return s * (codes - z)
