import numpy as np
import pytest

from rpiq.calibration import (
    HessianAccumulator,
    accumulate,
    capture_snapshot,
    damp,
    partition,
)
from rpiq.grid import fit_layer_grid
from rpiq.gptq import quantize_layer_stage1


def make_layer(seed, rows=64, c_out=16, c_in=32, k=1, bits=4, group_size=16,
               percdamp=0.01, col_scale=None):
    """One calibrated layer: (w_fp, batches, snapshot, grid)."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(c_out, c_in))
    batches = []
    for _ in range(k):
        x = rng.normal(size=(rows, c_in))
        if col_scale is not None:
            x = x * col_scale
        batches.append(x)
    acc = HessianAccumulator(c_in)
    for x in batches:
        accumulate(acc, x)
    h_damped, lam = damp(acc, percdamp)
    snapshot = capture_snapshot(batches[-1], w, h_damped, lam, percdamp,
                                batches_seen=k)
    grid = fit_layer_grid(w, bits, group_size)
    return w, batches, snapshot, grid


def make_stage1(seed, **kw):
    w, batches, snapshot, grid = make_layer(seed, **kw)
    stage1 = quantize_layer_stage1(w, snapshot, grid)
    return w, batches, snapshot, grid, stage1


def on_grid_layer(seed, c_out=8, c_in=16, scale=0.25, zero_point=7, bits=4):
    """Weights that sit exactly on a power-of-two grid, with the extreme
    codes pinned so a min/max refit reproduces the same grid."""
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, 2 ** bits, size=(c_out, c_in))
    codes[:, 0] = 0
    codes[:, -1] = 2 ** bits - 1
    w = scale * (codes.astype(np.float64) - zero_point)
    return w, codes


@pytest.fixture
def rng():
    return np.random.default_rng(0)
