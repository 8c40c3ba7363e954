"""Acceptance gate: the eleven release criteria, one test each.

Every test prints a single PASS/FAIL line naming its criterion so a plain
`pytest -v -s tests/test_acceptance.py` run reads as a checklist. Tolerances
are part of the contract and are asserted exactly as stated.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from rpiq.calibration import (
    HessianAccumulator,
    accumulate,
    capture_snapshot,
    damp,
    partition,
)
from rpiq.container import dequantize_layer, load_quantized, save_quantized
from rpiq.grid import fit_grid, fit_layer_grid
from rpiq.gptq import quantize_layer_stage1, rtn_baseline
from rpiq.harness import (
    QuantizeConfig,
    SyntheticModelSpec,
    generate_model,
    holdout_batch,
    holdout_loss,
    quantize_model,
    reduction_pct,
)
from rpiq.linalg import frobenius_sq
from rpiq.refine import (
    RefineConfig,
    apply_block_update,
    directed_residual,
    init_state,
    refine_layer,
    solve_block,
)

from conftest import on_grid_layer


def report(num: int, title: str, ok: bool, detail: str) -> None:
    print(f"criterion {num:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
    assert ok, f"criterion {num} failed: {detail}"


def instance_snapshot(rng, n, width):
    """Single-block snapshot whose instance is an n-by-width design matrix."""
    x = rng.normal(size=(n, width))
    w = rng.normal(size=(1, width))
    acc = HessianAccumulator(width)
    accumulate(acc, x)
    h, lam = damp(acc, 0.01)
    return capture_snapshot(x, w, h, lam, 0.01)


def test_c01_solve_block_oracle():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        width = int(rng.integers(1, 17))
        n = int(rng.integers(max(8, width), 65))
        snap = instance_snapshot(rng, n, width)
        part = partition(snap, width, curvature="instance", instance_damp=0.0)
        d = rng.normal(size=(n, int(rng.integers(1, 9))))
        got = solve_block(part, 0, d)
        ref, *_ = np.linalg.lstsq(snap.x_orig, d, rcond=None)
        ref = ref.T
        rel = np.sqrt(frobenius_sq(got - ref) / max(frobenius_sq(ref), 1e-300))
        worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 5.0
    report(1, "solve_block vs least-squares oracle", ok,
           f"200 blocks, worst rel err {worst:.3e}, {elapsed:.2f}s")


def test_c02_directed_residual_oracle():
    rng = np.random.default_rng(102)
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(100):
        m = int(rng.integers(1, 9))
        width = int(rng.integers(1, 5))
        c_in = m * width
        n = int(rng.integers(c_in + 1, c_in + 20))
        snap = instance_snapshot(rng, n, c_in)
        part = partition(snap, width, curvature="instance", instance_damp=1e-9)
        state = init_state(rng.normal(size=(3, c_in)), part, alpha=1.0, t_max=1)
        for j in range(m):  # randomize the mixed state
            apply_block_update(state, j, rng.normal(size=state.blocks[j].shape))
        y = rng.normal(size=(n, 3))
        i = int(rng.integers(0, m))
        got = directed_residual(state, y, i)
        expected = y.copy()
        for j in range(m):
            if j != i:
                expected -= part.x_blocks[j] @ state.blocks[j].T
        rel = np.sqrt(frobenius_sq(got - expected)
                      / max(frobenius_sq(expected), 1e-300))
        worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 5.0
    report(2, "directed_residual vs from-scratch recomputation", ok,
           f"100 states, worst rel err {worst:.3e}, {elapsed:.2f}s")


def test_c03_monotone_refinement():
    t0 = time.perf_counter()
    cfg = QuantizeConfig(method="rpiq", bits=4, group_size=128, block_size=8,
                         percdamp=0.01, iters=5, alpha=1.0,
                         curvature="instance")
    reductions = []
    never_worse = True
    for seed in range(20):
        spec = SyntheticModelSpec(shapes=((64, 64),) * 3, seed=seed,
                                  batches=8, rows=128)
        model, batches = generate_model(spec)
        res = quantize_model(model, batches, cfg)
        for rep in res.layer_reports:
            never_worse &= rep.gamma_final <= rep.gamma_stage1
            reductions.append(rep.reduction_pct)
    med = float(np.median(reductions))
    elapsed = time.perf_counter() - t0
    ok = never_worse and med > 0.0 and elapsed < 60.0
    report(3, "refinement never regresses and typically improves", ok,
           f"60 layers, median reduction {med:.2f}%, "
           f"all final<=initial: {never_worse}, {elapsed:.1f}s")


def test_c04_reduction_statistic():
    a = reduction_pct(39.25, 3.56)
    b = reduction_pct(2522746.50, 1591786.25)
    ok = abs(a - 90.92) <= 0.01 and abs(b - 36.90) <= 0.01
    report(4, "reduction_pct reference points", ok,
           f"reduction_pct(39.25, 3.56)={a:.4f}, "
           f"reduction_pct(2522746.50, 1591786.25)={b:.4f}")


def test_c05_early_stopping():
    rng = np.random.default_rng(105)
    w, codes = on_grid_layer(105, c_out=8, c_in=16)
    x = rng.normal(size=(48, 16))
    acc = HessianAccumulator(16)
    accumulate(acc, x)
    h, lam = damp(acc, 0.01)
    snap = capture_snapshot(x, w, h, lam, 0.01)
    grid = fit_layer_grid(w, 4, 16)
    s1 = quantize_layer_stage1(w, snap, grid)
    part = partition(snap, 8)
    res = refine_layer(s1, snap, part, RefineConfig(alpha=1.0, t_max=5))
    tr = res.trace
    ok = (s1.recon_error == 0.0 and tr.stopped_early
          and tr.iterations < 5 and tr.gamma[-1] == 0.0)
    report(5, "loss floor triggers early stop before the sweep budget", ok,
           f"gamma0={tr.gamma[0]}, iterations={tr.iterations}, "
           f"stopped_early={tr.stopped_early}")


def test_c06_single_instance_memory():
    cfg = QuantizeConfig(method="rpiq", bits=4, group_size=32, block_size=16,
                         percdamp=0.01, iters=3, alpha=1.0, curvature="instance")
    sizes = {}
    for k in (2, 8, 32):
        spec = SyntheticModelSpec(shapes=((48, 48), (48, 48)), seed=6,
                                  batches=k, rows=64)
        model, batches = generate_model(spec)
        sizes[k] = quantize_model(model, batches, cfg).stage2_retained_bytes
    ok = len(set(sizes.values())) == 1
    report(6, "retained calibration bytes independent of batch count", ok,
           f"k=2/8/32 -> {sizes[2]}/{sizes[8]}/{sizes[32]} bytes")


def test_c07_stage2_time_invariance():
    t0 = time.perf_counter()
    cfg = QuantizeConfig(method="rpiq", bits=4, group_size=128, block_size=32,
                         percdamp=0.01, iters=16, alpha=0.5,
                         early_stop_tol=None, curvature="global")

    def stage2_median(k, reps=5):
        times = []
        for _ in range(reps):
            spec = SyntheticModelSpec(shapes=((256, 256), (256, 256)), seed=7,
                                      batches=k, rows=128)
            model, batches = generate_model(spec)
            times.append(quantize_model(model, batches, cfg).stage2_seconds)
        return float(np.median(times))

    stage2_median(8, reps=1)  # warm caches before timing
    t8 = stage2_median(8)
    t64 = stage2_median(64)
    variation = abs(t8 - t64) / min(t8, t64)
    elapsed = time.perf_counter() - t0
    ok = variation < 0.20 and elapsed < 120.0
    report(7, "stage-2 wall time independent of batch count", ok,
           f"k=8: {t8:.3f}s, k=64: {t64:.3f}s, variation {100 * variation:.1f}%, "
           f"total {elapsed:.1f}s")


def test_c08_stage1_sanity_vs_rtn():
    wins = 0
    for seed in range(100):
        rng = np.random.default_rng(seed + 800)
        w = rng.normal(size=(8, 16))
        x = rng.normal(size=(48, 16)) * rng.uniform(0.5, 2.0, size=16)
        acc = HessianAccumulator(16)
        accumulate(acc, x)
        h, lam = damp(acc, 0.01)
        snap = capture_snapshot(x, w, h, lam, 0.01)
        grid = fit_layer_grid(w, 4, 8)
        s1 = quantize_layer_stage1(w, snap, grid)
        rtn_err = frobenius_sq(snap.y_orig - x @ rtn_baseline(w, grid).T)
        wins += s1.recon_error <= rtn_err + 1e-12

    iso_worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=(8, 16))
        x = np.eye(16) * 1.3
        acc = HessianAccumulator(16)
        accumulate(acc, x)
        h, lam = damp(acc, 0.01)
        snap = capture_snapshot(x, w, h, lam, 0.01)
        grid = fit_layer_grid(w, 4, 8)
        s1 = quantize_layer_stage1(w, snap, grid)
        iso_worst = max(iso_worst,
                        float(np.max(np.abs(s1.w_init - rtn_baseline(w, grid)))))
    ok = wins >= 90 and iso_worst <= 1e-9
    report(8, "stage 1 never loses to plain rounding", ok,
           f"{wins}/100 anisotropic wins, isotropic max dev {iso_worst:.2e}")


def test_c09_bit_exact_serialization(tmp_path):
    cfg = QuantizeConfig(method="rpiq", bits=4, group_size=8, block_size=8,
                         percdamp=0.01, iters=3, alpha=1.0,
                         curvature="instance", instance_damp=1e-8)
    worst_ulp = 0
    identical = True
    for seed in range(10):
        spec = SyntheticModelSpec(shapes=((16, 32), (8, 16)), seed=seed,
                                  batches=3, rows=48)
        model, batches = generate_model(spec)
        res = quantize_model(model, batches, cfg)
        p1 = tmp_path / f"a{seed}.rpiq"
        p2 = tmp_path / f"b{seed}.rpiq"
        save_quantized(res.artifact, p1)
        save_quantized(quantize_model(model, batches, cfg).artifact, p2)
        identical &= p1.read_bytes() == p2.read_bytes()
        loaded = load_quantized(p1)
        for layer in loaded.layers:
            deq = dequantize_layer(layer)
            ref = res.refined[layer.name].astype(np.float32)
            ulp = int(np.max(np.abs(deq.view(np.int32) - ref.view(np.int32))))
            worst_ulp = max(worst_ulp, ulp)
    ok = worst_ulp == 0 and identical
    report(9, "artifacts round-trip bit-exactly", ok,
           f"10 models, max deviation {worst_ulp} ULP, "
           f"byte-identical reruns: {identical}")


def test_c10_overfitting_direction():
    t0 = time.perf_counter()
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed + 1000)
        w = rng.normal(size=(64, 64))
        batches = [rng.normal(size=(32, 64)) for _ in range(2)]
        acc = HessianAccumulator(64)
        for b in batches:
            accumulate(acc, b)
        h, lam = damp(acc, 0.01)
        snap = capture_snapshot(batches[-1], w, h, lam, 0.01, batches_seen=2)
        grid = fit_layer_grid(w, 4, 128)
        s1 = quantize_layer_stage1(w, snap, grid)
        part = partition(snap, 8, curvature="instance", instance_damp=1e-8)
        x_hold = np.random.default_rng(seed + 20_000).normal(size=(256, 64))
        hold = {}
        for t_max in (5, 25):
            res = refine_layer(s1, snap, part,
                               RefineConfig(alpha=1.0, t_max=t_max,
                                            early_stop_tol=None))
            hold[t_max] = holdout_loss(x_hold, w, res.w_refined)
        wins += hold[25] > hold[5]
    elapsed = time.perf_counter() - t0
    ok = wins > 10 and elapsed < 120.0
    report(10, "longer refinement overfits the retained instance", ok,
           f"holdout loss grew from t_max=5 to t_max=25 on {wins}/20 seeds, "
           f"{elapsed:.1f}s")


def test_c11_quantizer_bound():
    worst_excess = -np.inf
    for bits in (2, 4, 8):
        rng = np.random.default_rng(bits)
        lo, hi = -3.0, 2.0
        scale, zp = fit_grid(np.array([lo, hi]), bits)
        xs = rng.uniform(lo, hi, size=100_000)
        codes = np.clip(np.rint(xs / scale) + zp, 0, 2 ** bits - 1)
        err = np.max(np.abs(xs - scale * (codes - zp)))
        worst_excess = max(worst_excess, float(err - scale / 2))
    ok = worst_excess <= 0.0
    report(11, "round-trip error bounded by half a step", ok,
           f"max(|err| - scale/2) = {worst_excess:.3e} over 3e5 draws")
