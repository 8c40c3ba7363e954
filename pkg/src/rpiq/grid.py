"""Uniform asymmetric quantization grids with per-row column groups.

A grid maps a float to one of 2**bits integer codes via
``code = clamp(round(x / scale) + zero_point, 0, 2**bits - 1)`` and back via
``scale * (code - zero_point)``. Grids are fitted independently for every
(output row, group of group_size consecutive input columns) pair from the
min/max range of that group. Rounding is half-to-even everywhere.

Scales are snapped to float32 precision at fit time (kept in float64 after
that) so a packed artifact, which stores scales as f32, dequantizes to the
exact same values the engine computed with.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, CorruptFileError, ShapeError

BITS_MIN = 2
BITS_MAX = 8

# Applied after the float32 snap, so it also catches underflow to 0.0.
SCALE_FLOOR = float(np.float32(1e-12))


def _check_bits(bits: int) -> int:
    if not isinstance(bits, (int, np.integer)) or not BITS_MIN <= int(bits) <= BITS_MAX:
        raise ArgumentError(f"bits must be an integer in [{BITS_MIN}, {BITS_MAX}], got {bits!r}")
    return int(bits)


def fit_grid(values, bits: int) -> tuple[float, int]:
    """Fit (scale, zero_point) to the min/max range of one group of values."""
    bits = _check_bits(bits)
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size == 0:
        raise ArgumentError("cannot fit a grid to an empty group")
    if not np.all(np.isfinite(vals)):
        raise ArgumentError("grid fitting requires finite values")
    levels = (1 << bits) - 1
    vmin = float(vals.min())
    vmax = float(vals.max())
    scale = float(np.float32((vmax - vmin) / levels))
    if scale <= 0.0:
        scale = SCALE_FLOOR
    zero_point = int(np.clip(np.round(-vmin / scale), 0, levels))
    return scale, zero_point


def quantize(x: float, scale: float, zero_point: int, bits: int) -> int:
    """Map one value to its integer code (half-to-even, saturating clamp)."""
    bits = _check_bits(bits)
    if not scale > 0.0:
        raise ArgumentError(f"scale must be positive, got {scale!r}")
    levels = (1 << bits) - 1
    if not 0 <= int(zero_point) <= levels:
        raise ArgumentError(f"zero_point {zero_point!r} outside [0, {levels}]")
    code = np.round(float(x) / scale) + int(zero_point)
    return int(np.clip(code, 0, levels))


def dequantize(code: int, scale: float, zero_point: int, bits: int) -> float:
    """Map one integer code back to its grid value."""
    bits = _check_bits(bits)
    if not scale > 0.0:
        raise ArgumentError(f"scale must be positive, got {scale!r}")
    levels = (1 << bits) - 1
    if not 0 <= int(code) <= levels:
        raise ArgumentError(f"code {code!r} outside [0, {levels}] for {bits}-bit grid")
    return float(scale * (int(code) - int(zero_point)))


@dataclass(frozen=True)
class QuantGrid:
    """Per-(row, column-group) scales and zero points for one weight matrix."""

    bits: int
    group_size: int
    cols: int
    scale: np.ndarray       # (rows, n_groups) float64, f32-representable values
    zero_point: np.ndarray  # (rows, n_groups) int64

    def __post_init__(self):
        _check_bits(self.bits)
        if self.group_size < 1:
            raise ArgumentError(f"group_size must be >= 1, got {self.group_size}")
        if self.cols < 0:
            raise ArgumentError(f"cols must be >= 0, got {self.cols}")
        expected = -(-self.cols // self.group_size) if self.cols else 0
        if self.scale.ndim != 2 or self.scale.shape != self.zero_point.shape:
            raise ShapeError("scale and zero_point must share a (rows, n_groups) shape")
        if self.scale.shape[1] != expected:
            raise ShapeError(
                f"expected {expected} groups for cols={self.cols}, "
                f"group_size={self.group_size}, got {self.scale.shape[1]}"
            )
        if self.scale.size and not np.all(self.scale > 0.0):
            raise ArgumentError("all scales must be positive")
        if self.zero_point.size and (
            self.zero_point.min() < 0 or self.zero_point.max() > self.levels
        ):
            raise ArgumentError("zero points must lie within the code range")

    @property
    def rows(self) -> int:
        return self.scale.shape[0]

    @property
    def n_groups(self) -> int:
        return self.scale.shape[1]

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    def column_params(self, c0: int, c1: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-column (scale, zero_point) arrays of shape (rows, c1 - c0)."""
        if not 0 <= c0 <= c1 <= self.cols:
            raise ArgumentError(f"column range [{c0}, {c1}) outside [0, {self.cols})")
        idx = np.arange(c0, c1) // self.group_size
        return self.scale[:, idx], self.zero_point[:, idx]


def fit_layer_grid(w, bits: int, group_size: int) -> QuantGrid:
    """Fit one grid per (row, column group) of a weight matrix."""
    bits = _check_bits(bits)
    if group_size < 1:
        raise ArgumentError(f"group_size must be >= 1, got {group_size}")
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"weights must be 2-D, got ndim={w.ndim}")
    rows, cols = w.shape
    n_groups = -(-cols // group_size) if cols else 0
    scale = np.empty((rows, n_groups), dtype=np.float64)
    zero = np.empty((rows, n_groups), dtype=np.int64)
    for r in range(rows):
        for g in range(n_groups):
            s, z = fit_grid(w[r, g * group_size:(g + 1) * group_size], bits)
            scale[r, g] = s
            zero[r, g] = z
    return QuantGrid(bits=bits, group_size=group_size, cols=cols, scale=scale, zero_point=zero)


def _check_block(b, grid: QuantGrid, col_start: int, name: str) -> np.ndarray:
    arr = np.asarray(b, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if arr.shape[0] != grid.rows:
        raise ShapeError(f"{name} has {arr.shape[0]} rows, grid expects {grid.rows}")
    if col_start < 0 or col_start + arr.shape[1] > grid.cols:
        raise ArgumentError(
            f"{name} columns [{col_start}, {col_start + arr.shape[1]}) "
            f"fall outside the grid's {grid.cols} columns"
        )
    return arr


def quantize_columns(b, grid: QuantGrid, col_start: int = 0) -> np.ndarray:
    """Vectorized quantize of a column slice starting at col_start."""
    arr = _check_block(b, grid, col_start, "block")
    s, z = grid.column_params(col_start, col_start + arr.shape[1])
    codes = np.rint(arr / s) + z
    return np.clip(codes, 0, grid.levels).astype(np.int64)


def dequantize_columns(codes, grid: QuantGrid, col_start: int = 0) -> np.ndarray:
    """Vectorized dequantize of a column slice starting at col_start."""
    arr = np.asarray(codes)
    if arr.ndim != 2 or arr.shape[0] != grid.rows:
        raise ShapeError(f"codes shape {arr.shape} does not match grid rows {grid.rows}")
    if col_start < 0 or col_start + arr.shape[1] > grid.cols:
        raise ArgumentError("code columns fall outside the grid")
    if arr.size and (arr.min() < 0 or arr.max() > grid.levels):
        raise ArgumentError(f"codes outside [0, {grid.levels}] for {grid.bits}-bit grid")
    s, z = grid.column_params(col_start, col_start + arr.shape[1])
    return s * (arr.astype(np.float64) - z)


def project_columns(b, grid: QuantGrid, col_start: int = 0) -> np.ndarray:
    """Quantize-then-dequantize a column slice. Idempotent bit-exactly."""
    return dequantize_columns(quantize_columns(b, grid, col_start), grid, col_start)


def project_matrix(b, grid: QuantGrid) -> np.ndarray:
    """Project a full (rows x cols) matrix onto the grid."""
    arr = _check_block(b, grid, 0, "matrix")
    if arr.shape[1] != grid.cols:
        raise ShapeError(f"matrix has {arr.shape[1]} cols, grid expects {grid.cols}")
    return project_columns(arr, grid, 0)


def refit_columns(grid: QuantGrid, values, col_start: int) -> QuantGrid:
    """Refit the grid entries for the groups covered by a column slice.

    The slice must align with group boundaries so no group is refitted from a
    partial view of its columns.
    """
    arr = _check_block(values, grid, col_start, "values")
    width = arr.shape[1]
    end = col_start + width
    if col_start % grid.group_size != 0:
        raise ArgumentError("refit slice must start on a group boundary")
    if end != grid.cols and end % grid.group_size != 0:
        raise ArgumentError("refit slice must end on a group boundary")
    scale = grid.scale.copy()
    zero = grid.zero_point.copy()
    g0 = col_start // grid.group_size
    g1 = -(-end // grid.group_size)
    for r in range(grid.rows):
        for g in range(g0, g1):
            lo = g * grid.group_size - col_start
            hi = min((g + 1) * grid.group_size, end) - col_start
            s, z = fit_grid(arr[r, lo:hi], grid.bits)
            scale[r, g] = s
            zero[r, g] = z
    return QuantGrid(bits=grid.bits, group_size=grid.group_size, cols=grid.cols,
                     scale=scale, zero_point=zero)


# ---------------------------------------------------------------------------
# Bit packing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PackedBlock:
    """Codes packed into a little-endian bitstream.

    For 4-bit codes this is two codes per byte with the even-index code in the
    low nibble. grids optionally carries the per-group (scale, zero_point)
    pairs the codes were produced with.
    """

    bits: int
    n_codes: int
    data: bytes
    grids: tuple | None = None


def pack_codes(codes, bits: int, grids: tuple | None = None) -> PackedBlock:
    """Pack integer codes into ceil(n_codes * bits / 8) bytes."""
    bits = _check_bits(bits)
    arr = np.asarray(codes).ravel()
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise ArgumentError("codes must be integers")
    levels = (1 << bits) - 1
    if arr.size and (arr.min() < 0 or arr.max() > levels):
        raise ArgumentError(f"codes outside [0, {levels}] cannot be packed at {bits} bits")
    if arr.size == 0:
        return PackedBlock(bits=bits, n_codes=0, data=b"", grids=grids)
    planes = ((arr[:, None].astype(np.uint32) >> np.arange(bits)) & 1).astype(np.uint8)
    data = np.packbits(planes.ravel(), bitorder="little").tobytes()
    return PackedBlock(bits=bits, n_codes=int(arr.size), data=data, grids=grids)


def unpack_codes(block: PackedBlock) -> np.ndarray:
    """Recover the exact integer codes from a PackedBlock."""
    _check_bits(block.bits)
    expected = (block.n_codes * block.bits + 7) // 8
    if len(block.data) != expected:
        raise CorruptFileError(
            f"packed buffer holds {len(block.data)} bytes, expected {expected}"
        )
    if block.n_codes == 0:
        return np.zeros(0, dtype=np.int64)
    buf = np.frombuffer(block.data, dtype=np.uint8)
    planes = np.unpackbits(buf, bitorder="little", count=block.n_codes * block.bits)
    weights = (1 << np.arange(block.bits)).astype(np.int64)
    return planes.reshape(block.n_codes, block.bits).astype(np.int64) @ weights
