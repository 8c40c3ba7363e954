"""Streamed Hessian calibration and the single-instance refinement snapshot.

Calibration walks the batch list once, accumulating H = sum_b X_b^T X_b one
batch at a time so no concatenated activation matrix ever exists. After
damping, only the last batch is retained (together with its full-precision
outputs) as the refinement instance; everything stage 2 touches lives in this
snapshot, so its memory footprint does not depend on how many batches were
streamed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, CalibrationError, FactorizationError, ShapeError
from .linalg import CholeskyFactor, as_matrix, cholesky, matmul

CURVATURE_MODES = ("global", "instance")


@dataclass
class HessianAccumulator:
    """Running X^T X accumulator. Single-writer: accumulate mutates in place."""

    dim: int
    h: np.ndarray = field(default=None)  # type: ignore[assignment]
    batches_seen: int = 0

    def __post_init__(self):
        if self.dim < 0:
            raise ArgumentError(f"dim must be >= 0, got {self.dim}")
        if self.h is None:
            self.h = np.zeros((self.dim, self.dim), dtype=np.float64)
        if self.h.shape != (self.dim, self.dim):
            raise ShapeError(f"accumulator matrix shape {self.h.shape} != ({self.dim}, {self.dim})")


def accumulate(acc: HessianAccumulator, x_batch) -> HessianAccumulator:
    """Add one batch's Gram matrix to the accumulator and return it."""
    x = as_matrix(x_batch, "x_batch")
    if x.shape[1] != acc.dim:
        raise ShapeError(f"batch has {x.shape[1]} columns, accumulator dim is {acc.dim}")
    acc.h += x.T @ x
    acc.batches_seen += 1
    return acc


def damp(acc: HessianAccumulator, percdamp: float) -> tuple[np.ndarray, float]:
    """Return (H + lambda*I, lambda) with lambda = percdamp * mean(diag(H))."""
    if not percdamp > 0.0:
        raise ArgumentError(f"percdamp must be positive, got {percdamp!r}")
    diag_mean = float(np.mean(np.diag(acc.h))) if acc.dim else 0.0
    if diag_mean <= 0.0:
        raise CalibrationError(
            "Hessian diagonal is all zero; accumulate at least one non-zero batch first"
        )
    lam = percdamp * diag_mean
    h_damped = acc.h + lam * np.eye(acc.dim)
    return h_damped, lam


@dataclass(frozen=True)
class CalibrationSnapshot:
    """Everything stage 2 needs: damped curvature plus one retained instance."""

    h_damped: np.ndarray   # (dim, dim)
    lam: float
    percdamp: float
    x_orig: np.ndarray     # (n, dim), the last calibration batch
    y_orig: np.ndarray     # (n, c_out), full-precision outputs on x_orig
    batches_seen: int = 1

    @property
    def dim(self) -> int:
        return self.h_damped.shape[0]

    def retained_bytes(self) -> int:
        """Engine-owned bytes kept alive for refinement."""
        return int(self.h_damped.nbytes + self.x_orig.nbytes + self.y_orig.nbytes)


def capture_snapshot(x_last, w_fp, h_damped, lam: float, percdamp: float,
                     batches_seen: int = 1) -> CalibrationSnapshot:
    """Freeze the last batch and its full-precision outputs for refinement."""
    x = as_matrix(x_last, "x_last")
    w = as_matrix(w_fp, "w_fp")
    h = as_matrix(h_damped, "h_damped")
    if h.shape[0] != h.shape[1]:
        raise ShapeError(f"h_damped must be square, got {h.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"batch has {x.shape[1]} columns, weights expect {w.shape[1]}")
    if h.shape[0] != x.shape[1]:
        raise ShapeError(f"h_damped dim {h.shape[0]} != batch columns {x.shape[1]}")
    if batches_seen < 1:
        raise ArgumentError(f"batches_seen must be >= 1, got {batches_seen}")
    y = matmul(x, w.T)
    return CalibrationSnapshot(
        h_damped=h.copy(), lam=float(lam), percdamp=float(percdamp),
        x_orig=x.copy(), y_orig=y, batches_seen=int(batches_seen),
    )


@dataclass(frozen=True)
class BlockPartition:
    """Column blocks with their activation slices and curvature factors."""

    ranges: tuple[tuple[int, int], ...]
    x_blocks: tuple[np.ndarray, ...]
    factors: tuple[CholeskyFactor, ...]
    curvature: str

    @property
    def n_blocks(self) -> int:
        return len(self.ranges)

    def retained_bytes(self) -> int:
        """Bytes owned by the partition itself (factors; x slices are views)."""
        return int(sum(f.lower.nbytes for f in self.factors))


def block_ranges(cols: int, block_size: int) -> tuple[tuple[int, int], ...]:
    """Consecutive [c1, c2) column ranges of width block_size (last may be short)."""
    if block_size < 1:
        raise ArgumentError(f"block_size must be >= 1, got {block_size}")
    if cols < 0:
        raise ArgumentError(f"cols must be >= 0, got {cols}")
    return tuple((c, min(c + block_size, cols)) for c in range(0, cols, block_size))


def partition(snapshot: CalibrationSnapshot, block_size: int,
              curvature: str = "global", instance_damp: float = 0.0) -> BlockPartition:
    """Split the snapshot into column blocks and factor each block's curvature.

    In "global" mode the normal-equations matrix for block i is the damped
    Hessian submatrix divided by batches_seen, which puts the accumulated
    cross-batch curvature at the scale of the single-instance right-hand
    side the solves use. In "instance" mode it is the block Gram of x_orig
    plus instance_damp on the diagonal.
    """
    if curvature not in CURVATURE_MODES:
        raise ArgumentError(f"curvature must be one of {CURVATURE_MODES}, got {curvature!r}")
    if instance_damp < 0.0:
        raise ArgumentError(f"instance_damp must be >= 0, got {instance_damp!r}")
    ranges = block_ranges(snapshot.dim, block_size)
    x_blocks = []
    factors = []
    for c1, c2 in ranges:
        x_i = snapshot.x_orig[:, c1:c2]
        if curvature == "global":
            curv = snapshot.h_damped[c1:c2, c1:c2] / snapshot.batches_seen
        else:
            curv = x_i.T @ x_i
            if instance_damp > 0.0:
                curv = curv + instance_damp * np.eye(c2 - c1)
        try:
            factor = cholesky(curv)
        except FactorizationError as exc:
            raise CalibrationError(
                f"block [{c1}, {c2}) curvature is not positive definite "
                f"(pivot {exc.pivot}); increase percdamp or use global curvature"
            ) from exc
        x_blocks.append(x_i)
        factors.append(factor)
    return BlockPartition(
        ranges=ranges, x_blocks=tuple(x_blocks), factors=tuple(factors), curvature=curvature,
    )
