import numpy as np
import pytest

from rpiq.errors import ArgumentError, CorruptFileError, ShapeError
from rpiq.grid import (
    PackedBlock,
    QuantGrid,
    SCALE_FLOOR,
    dequantize,
    dequantize_columns,
    fit_grid,
    fit_layer_grid,
    pack_codes,
    project_columns,
    project_matrix,
    quantize,
    quantize_columns,
    refit_columns,
    unpack_codes,
)

from conftest import on_grid_layer


def test_fit_grid_range_example():
    scale, zp = fit_grid(np.array([-1.0, 2.0]), 4)
    assert scale == pytest.approx(0.2, rel=1e-7)
    assert zp == 5
    # endpoints survive the trip within half a step
    for v in (-1.0, 2.0):
        code = quantize(v, scale, zp, 4)
        assert abs(dequantize(code, scale, zp, 4) - v) <= scale / 2


def test_fit_grid_scale_is_float32_exact():
    scale, _ = fit_grid(np.array([-1.0, 2.0]), 4)
    assert scale == float(np.float32(scale))


def test_fit_grid_constant_values_floor():
    scale, zp = fit_grid(np.zeros(5), 4)
    assert scale == SCALE_FLOOR
    assert zp == 0
    assert dequantize(quantize(0.0, scale, zp, 4), scale, zp, 4) == 0.0


def test_fit_grid_rejects_bad_bits():
    for bits in (1, 9, 0):
        with pytest.raises(ArgumentError):
            fit_grid(np.array([0.0, 1.0]), bits)


def test_quantize_nearest_level_oracle(rng):
    # brute force over all levels; ties have measure zero under uniform draws
    for bits in (2, 4, 8):
        levels = 2 ** bits - 1
        scale, zp = fit_grid(np.array([-2.5, 1.5]), bits)
        grid_points = np.array([dequantize(c, scale, zp, bits)
                                for c in range(levels + 1)])
        for x in rng.uniform(-2.5, 1.5, size=200):
            code = quantize(float(x), scale, zp, bits)
            assert code == int(np.argmin(np.abs(grid_points - x)))


def test_quantize_clips_out_of_range():
    scale, zp = fit_grid(np.array([-1.0, 1.0]), 4)
    assert quantize(-50.0, scale, zp, 4) == 0
    assert quantize(50.0, scale, zp, 4) == 15


def test_roundtrip_error_bound(rng):
    for bits in (2, 4, 8):
        scale, zp = fit_grid(np.array([-3.0, 2.0]), bits)
        xs = rng.uniform(-3.0, 2.0, size=5000)
        errs = [abs(dequantize(quantize(float(x), scale, zp, bits), scale, zp, bits) - x)
                for x in xs]
        assert max(errs) <= scale / 2 + 1e-12


def test_fit_layer_grid_shapes_and_groups(rng):
    w = rng.normal(size=(6, 10))
    grid = fit_layer_grid(w, 4, 4)
    assert grid.rows == 6
    assert grid.cols == 10
    assert grid.n_groups == 3  # 4 + 4 + 2
    assert grid.scale.shape == (6, 3)
    assert grid.zero_point.shape == (6, 3)


def test_fit_layer_grid_per_group_minmax(rng):
    w = rng.normal(size=(3, 8))
    grid = fit_layer_grid(w, 4, 4)
    for r in range(3):
        for g in range(2):
            seg = w[r, 4 * g:4 * (g + 1)]
            s, zp = fit_grid(seg, 4)
            assert grid.scale[r, g] == s
            assert grid.zero_point[r, g] == zp


def test_column_roundtrip_on_grid_exact():
    w, codes = on_grid_layer(3)
    grid = fit_layer_grid(w, 4, 16)
    got = quantize_columns(w, grid)
    np.testing.assert_array_equal(got, codes)
    np.testing.assert_array_equal(dequantize_columns(got, grid), w)


def test_quantize_columns_offset_slice(rng):
    w = rng.normal(size=(4, 12))
    grid = fit_layer_grid(w, 4, 4)
    whole = quantize_columns(w, grid)
    part = quantize_columns(w[:, 4:8], grid, col_start=4)
    np.testing.assert_array_equal(part, whole[:, 4:8])


def test_project_matches_quantize_dequantize(rng):
    w = rng.normal(size=(5, 8))
    grid = fit_layer_grid(w, 4, 4)
    proj = project_matrix(w + rng.normal(scale=0.05, size=w.shape), grid)
    # every projected value is on the grid
    codes = quantize_columns(proj, grid)
    np.testing.assert_allclose(dequantize_columns(codes, grid), proj,
                               rtol=0, atol=0)


def test_project_columns_idempotent(rng):
    w = rng.normal(size=(5, 8))
    grid = fit_layer_grid(w, 4, 8)
    once = project_columns(w, grid)
    np.testing.assert_array_equal(project_columns(once, grid), once)


def test_refit_columns_group_alignment(rng):
    w = rng.normal(size=(4, 8))
    grid = fit_layer_grid(w, 4, 4)
    new_vals = rng.normal(size=(4, 4))
    refit = refit_columns(grid, new_vals, 4)
    # group 0 untouched, group 1 refitted to the new values
    np.testing.assert_array_equal(refit.scale[:, 0], grid.scale[:, 0])
    for r in range(4):
        s, zp = fit_grid(new_vals[r], 4)
        assert refit.scale[r, 1] == s
        assert refit.zero_point[r, 1] == zp


def test_refit_columns_rejects_misaligned(rng):
    w = rng.normal(size=(4, 8))
    grid = fit_layer_grid(w, 4, 4)
    with pytest.raises(ArgumentError):
        refit_columns(grid, rng.normal(size=(4, 4)), 2)


def test_pack_codes_nibble_order():
    block = pack_codes(np.array([3, 12]), 4)
    assert block.data == bytes([0xC3])
    np.testing.assert_array_equal(unpack_codes(block), [3, 12])


def test_pack_unpack_roundtrip_all_widths(rng):
    for bits in range(2, 9):
        codes = rng.integers(0, 2 ** bits, size=101)
        block = pack_codes(codes, bits)
        np.testing.assert_array_equal(unpack_codes(block), codes)


def test_pack_rejects_out_of_range_codes():
    with pytest.raises(ArgumentError):
        pack_codes(np.array([0, 16]), 4)


def test_unpack_rejects_truncated_buffer():
    block = pack_codes(np.arange(16) % 16, 4)
    bad = PackedBlock(bits=4, n_codes=16, data=block.data[:-1])
    with pytest.raises(CorruptFileError):
        unpack_codes(bad)


def test_quantgrid_validates_shapes():
    with pytest.raises(ShapeError):
        QuantGrid(bits=4, group_size=4, cols=8,
                  scale=np.ones((2, 3)), zero_point=np.zeros((2, 2), dtype=np.int64))


def test_column_params_expansion(rng):
    w = rng.normal(size=(2, 6))
    grid = fit_layer_grid(w, 4, 2)
    s, z = grid.column_params(2, 5)
    assert s.shape == (2, 3)
    np.testing.assert_array_equal(s[:, 0], grid.scale[:, 1])
    np.testing.assert_array_equal(s[:, 2], grid.scale[:, 2])
