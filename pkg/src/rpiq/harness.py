"""Desk-scale harness: synthetic models, the end-to-end pipeline, reports.

generate_model draws a deterministic stack of dense layers plus calibration
batches for the first layer's inputs. quantize_model walks the stack one
layer at a time: stream the batches through the Hessian accumulator, damp,
snapshot the last batch, quantize (stage 1), optionally refine (stage 2),
then forward the batches through the just-quantized layer so the next layer
calibrates against what it will actually see at inference (sequential_prop
False propagates full-precision outputs instead).

Memory is accounted by tagging engine-owned arrays (batches, Hessian,
snapshot, partition factors, stage working state) in a MemoryMeter; the peak
is the largest tag sum observed, a pure function of shapes rather than of
the allocator. Wall times come from perf_counter. Method overheads are the
differences between two instrumented runs.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .calibration import HessianAccumulator, accumulate, capture_snapshot, damp, partition
from .container import (
    KIND_CALIBRATION,
    KIND_MODEL,
    QuantizedArtifact,
    QuantizedLayer,
    TraceSummary,
    save_checkpoint,
)
from .errors import ArgumentError, ModelSpecError, ShapeError
from .gptq import quantize_layer_stage1
from .grid import BITS_MAX, BITS_MIN, fit_layer_grid
from .linalg import as_matrix, frobenius_sq, matmul
from .refine import RefineConfig, RefinementTrace, RefineResult, refine_layer

METHODS = ("gptq", "rpiq")


# ---------------------------------------------------------------------------
# Synthetic models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticModelSpec:
    """A stack of dense layers plus the calibration set to draw for them.

    shapes lists (c_out, c_in) per layer; consecutive layers must chain
    (c_in of layer l+1 == c_out of layer l) because calibration batches are
    propagated through the stack. Distributions are ("gaussian", sigma) or
    ("uniform", low, high).
    """

    shapes: tuple[tuple[int, int], ...]
    weight_dist: tuple = ("gaussian", 1.0)
    act_dist: tuple = ("gaussian", 1.0)
    seed: int = 0
    batches: int = 8
    rows: int = 128


def _draw(rng: np.random.Generator, dist: tuple, size: tuple[int, int]) -> np.ndarray:
    kind = dist[0]
    if kind == "gaussian":
        sigma = float(dist[1])
        if not sigma > 0.0:
            raise ModelSpecError(f"gaussian sigma must be positive, got {sigma}")
        return rng.normal(0.0, sigma, size=size)
    if kind == "uniform":
        low, high = float(dist[1]), float(dist[2])
        if not high > low:
            raise ModelSpecError(f"uniform range [{low}, {high}) is empty")
        return rng.uniform(low, high, size=size)
    raise ModelSpecError(f"unknown distribution kind {kind!r}")


def _validate_spec(spec: SyntheticModelSpec) -> None:
    if spec.batches < 1:
        raise ModelSpecError(f"batches must be >= 1, got {spec.batches}")
    if spec.rows < 1:
        raise ModelSpecError(f"rows must be >= 1, got {spec.rows}")
    for i, (c_out, c_in) in enumerate(spec.shapes):
        if c_out < 1 or c_in < 1:
            raise ModelSpecError(f"layer {i} shape ({c_out}, {c_in}) is not positive")
    for i in range(1, len(spec.shapes)):
        prev_out = spec.shapes[i - 1][0]
        cur_in = spec.shapes[i][1]
        if prev_out != cur_in:
            raise ModelSpecError(
                f"layer {i} expects {cur_in} inputs but layer {i - 1} emits {prev_out}"
            )


def generate_model(spec: SyntheticModelSpec):
    """Draw (model, batches): named f32 weight matrices and f32 input batches."""
    _validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    model = []
    for i, (c_out, c_in) in enumerate(spec.shapes):
        w = _draw(rng, spec.weight_dist, (c_out, c_in)).astype(np.float32)
        model.append((f"layer{i}", w))
    batches = []
    if spec.shapes:
        c_in0 = spec.shapes[0][1]
        for _ in range(spec.batches):
            batches.append(_draw(rng, spec.act_dist, (spec.rows, c_in0)).astype(np.float32))
    return model, batches


def holdout_batch(spec: SyntheticModelSpec) -> np.ndarray:
    """An instance from the same activation distribution, never used to calibrate."""
    _validate_spec(spec)
    if not spec.shapes:
        raise ModelSpecError("holdout batch needs at least one layer shape")
    rng = np.random.default_rng(spec.seed + 1)
    return _draw(rng, spec.act_dist, (spec.rows, spec.shapes[0][1])).astype(np.float32)


def write_generated(spec: SyntheticModelSpec, model_path, calib_path) -> None:
    """Generate and store the model and its calibration batches."""
    model, batches = generate_model(spec)
    save_checkpoint(model_path, model, kind=KIND_MODEL)
    save_checkpoint(calib_path, [(f"batch.{i:04d}", b) for i, b in enumerate(batches)],
                    kind=KIND_CALIBRATION)


def holdout_loss(x_holdout, w_fp, w_quant) -> float:
    """Output residual loss of quantized weights on an unseen instance."""
    x = as_matrix(x_holdout, "x_holdout")
    diff = as_matrix(w_fp, "w_fp") - as_matrix(w_quant, "w_quant")
    return frobenius_sq(matmul(x, diff.T))


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantizeConfig:
    method: str = "rpiq"
    bits: int = 4
    group_size: int = 128
    block_size: int = 128
    percdamp: float = 0.01
    iters: int = 5
    alpha: float = 0.01
    early_stop_tol: float | None = 1e-6
    curvature: str = "global"
    instance_damp: float = 0.0
    sequential_prop: bool = True
    refit_grids: bool = False
    store_snapshot: bool = False

    def echo_lines(self, prefix: str = "config.") -> list[str]:
        return [f"{prefix}{f.name}={getattr(self, f.name)}" for f in fields(self)]


def validate_config(cfg: QuantizeConfig) -> None:
    """Reject out-of-domain settings before any work happens."""
    if cfg.method not in METHODS:
        raise ArgumentError(f"method must be one of {METHODS}, got {cfg.method!r}")
    if not BITS_MIN <= cfg.bits <= BITS_MAX:
        raise ArgumentError(f"bits must be in [{BITS_MIN}, {BITS_MAX}], got {cfg.bits}")
    if cfg.group_size < 1:
        raise ArgumentError(f"group_size must be >= 1, got {cfg.group_size}")
    if cfg.block_size < 1:
        raise ArgumentError(f"block_size must be >= 1, got {cfg.block_size}")
    if not cfg.percdamp > 0.0:
        raise ArgumentError(f"percdamp must be positive, got {cfg.percdamp}")
    if cfg.iters < 0:
        raise ArgumentError(f"iters must be >= 0, got {cfg.iters}")
    if not 0.0 < cfg.alpha <= 1.0:
        raise ArgumentError(f"alpha must be in (0, 1], got {cfg.alpha}")
    if cfg.curvature not in ("global", "instance"):
        raise ArgumentError(f"curvature must be 'global' or 'instance', got {cfg.curvature!r}")
    if cfg.instance_damp < 0.0:
        raise ArgumentError(f"instance_damp must be >= 0, got {cfg.instance_damp}")
    if cfg.refit_grids and cfg.block_size % cfg.group_size != 0:
        raise ArgumentError(
            "refit_grids needs block_size to be a multiple of group_size "
            f"(got block_size={cfg.block_size}, group_size={cfg.group_size})"
        )


class MemoryMeter:
    """Tagged byte accounting for engine-owned arrays; peak of the tag sum."""

    def __init__(self):
        self._live: dict[str, int] = {}
        self.peak = 0

    def hold(self, tag: str, nbytes: int) -> None:
        self._live[tag] = int(nbytes)
        total = sum(self._live.values())
        if total > self.peak:
            self.peak = total

    def release(self, tag: str) -> None:
        self._live.pop(tag, None)


@dataclass(frozen=True)
class LayerReport:
    name: str
    gamma_stage1: float
    gamma_final: float
    reduction_pct: float
    iterations: int
    stopped_early: bool


@dataclass(frozen=True)
class PipelineResult:
    method: str
    config: QuantizeConfig
    artifact: QuantizedArtifact
    layer_reports: tuple[LayerReport, ...]
    traces: dict[str, RefinementTrace]
    refined: dict[str, np.ndarray]
    peak_bytes: int
    stage2_retained_bytes: int
    wall_seconds: float
    stage1_seconds: float
    stage2_seconds: float


def quantize_model(model, batches, cfg: QuantizeConfig) -> PipelineResult:
    """Quantize a named layer stack against streamed calibration batches.

    Args:
        model: iterable of (name, weight matrix), each (c_out x c_in).
        batches: input batches for the first layer, each (n x c_in).
        cfg: engine settings; cfg.method picks stage-1-only ("gptq") or
            stage 1 + refinement ("rpiq").
    """
    validate_config(cfg)
    t_start = time.perf_counter()
    meter = MemoryMeter()
    cur = [as_matrix(b, "batch") for b in batches]
    do_refine = cfg.method == "rpiq" and cfg.iters > 0

    layer_records: list[QuantizedLayer] = []
    reports: list[LayerReport] = []
    traces: dict[str, RefinementTrace] = {}
    refined: dict[str, np.ndarray] = {}
    stage1_seconds = 0.0
    stage2_seconds = 0.0
    stage2_retained = 0

    for name, w_raw in model:
        w_fp = as_matrix(w_raw, name)
        if not cur:
            raise ArgumentError(f"layer {name!r} has no calibration batches")
        if w_fp.shape[1] != cur[0].shape[1]:
            raise ShapeError(
                f"layer {name!r} expects {w_fp.shape[1]} input columns, "
                f"calibration provides {cur[0].shape[1]}"
            )
        meter.hold("batches", sum(b.nbytes for b in cur))
        acc = HessianAccumulator(w_fp.shape[1])
        meter.hold("hessian", acc.h.nbytes)
        for b in cur:
            accumulate(acc, b)
        h_damped, lam = damp(acc, cfg.percdamp)
        snap = capture_snapshot(cur[-1], w_fp, h_damped, lam, cfg.percdamp,
                                batches_seen=acc.batches_seen)
        meter.hold("snapshot", snap.retained_bytes())
        meter.release("hessian")

        grid = fit_layer_grid(w_fp, cfg.bits, cfg.group_size)
        t0 = time.perf_counter()
        stage1 = quantize_layer_stage1(w_fp, snap, grid)
        stage1_seconds += time.perf_counter() - t0
        meter.hold("stage1_work", stage1.work_bytes)
        meter.release("stage1_work")

        if do_refine:
            part = partition(snap, cfg.block_size, cfg.curvature,
                             instance_damp=cfg.instance_damp)
            meter.hold("partition", part.retained_bytes())
            rcfg = RefineConfig(alpha=cfg.alpha, t_max=cfg.iters,
                                early_stop_tol=cfg.early_stop_tol,
                                refit_grids=cfg.refit_grids)
            t0 = time.perf_counter()
            res = refine_layer(stage1, snap, part, rcfg)
            stage2_seconds += time.perf_counter() - t0
            meter.hold("refine_state", res.state_bytes)
            stage2_retained = max(
                stage2_retained,
                snap.retained_bytes() + part.retained_bytes() + res.state_bytes,
            )
            meter.release("refine_state")
            meter.release("partition")
        else:
            g0 = stage1.recon_error
            trace = RefinementTrace(gamma=(g0,), gamma_sweep=(g0,), stopped_early=False,
                                    iterations=0, total_reduction_pct=0.0)
            res = RefineResult(w_refined=stage1.w_init, codes=stage1.codes,
                               grid=grid, trace=trace, state_bytes=0)
        meter.release("snapshot")

        refined[name] = res.w_refined
        traces[name] = res.trace
        summary = TraceSummary(gamma_init=res.trace.gamma[0],
                               gamma_final=res.trace.gamma[-1],
                               iterations=res.trace.iterations,
                               stopped_early=res.trace.stopped_early)
        layer_records.append(QuantizedLayer(
            name=name, codes=res.codes, grid=res.grid, summary=summary,
            snapshot=(snap.x_orig, snap.y_orig) if cfg.store_snapshot else None,
        ))
        reports.append(LayerReport(
            name=name, gamma_stage1=res.trace.gamma[0], gamma_final=res.trace.gamma[-1],
            reduction_pct=res.trace.total_reduction_pct,
            iterations=res.trace.iterations, stopped_early=res.trace.stopped_early,
        ))

        prop_w = res.w_refined if cfg.sequential_prop else w_fp
        cur = [b @ prop_w.T for b in cur]
        meter.hold("batches", sum(b.nbytes for b in cur))
    meter.release("batches")

    artifact = QuantizedArtifact(bits=cfg.bits, group_size=cfg.group_size,
                                 layers=tuple(layer_records))
    return PipelineResult(
        method=cfg.method, config=cfg, artifact=artifact,
        layer_reports=tuple(reports), traces=traces, refined=refined,
        peak_bytes=meter.peak, stage2_retained_bytes=stage2_retained,
        wall_seconds=time.perf_counter() - t_start,
        stage1_seconds=stage1_seconds, stage2_seconds=stage2_seconds,
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def reduction_pct(gamma_init: float, gamma_final: float) -> float:
    """Percent loss reduction; 0 when the initial loss is already zero."""
    if gamma_init < 0.0 or gamma_final < 0.0:
        raise ArgumentError("losses must be non-negative")
    if gamma_init == 0.0:
        return 0.0
    return 100.0 * (gamma_init - gamma_final) / gamma_init


def perplexity(batch_losses) -> float:
    """exp of the mean per-batch loss."""
    losses = np.asarray(batch_losses, dtype=np.float64).ravel()
    if losses.size == 0:
        raise ArgumentError("perplexity needs at least one loss")
    if not np.all(np.isfinite(losses)):
        raise ArgumentError("losses must be finite")
    return float(np.exp(np.mean(losses)))


def accuracy(predictions, labels) -> float:
    """Mean exact-match rate."""
    preds = list(predictions)
    labs = list(labels)
    if not preds or len(preds) != len(labs):
        raise ArgumentError(
            f"predictions ({len(preds)}) and labels ({len(labs)}) must be equal-length "
            "and non-empty"
        )
    return sum(p == l for p, l in zip(preds, labs)) / len(preds)


@dataclass(frozen=True)
class OverheadDelta:
    delta_mem_bytes: int
    delta_time_s: float


def measure_overheads(run_gptq, run_rpiq) -> OverheadDelta:
    """Peak-memory and wall-time overhead of refinement over stage 1 alone."""
    return OverheadDelta(
        delta_mem_bytes=int(run_rpiq.peak_bytes) - int(run_gptq.peak_bytes),
        delta_time_s=float(run_rpiq.wall_seconds) - float(run_gptq.wall_seconds),
    )


# ---------------------------------------------------------------------------
# Comparison and reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonReport:
    config: QuantizeConfig
    rows: tuple[LayerReport, ...]
    delta_mem_bytes: int
    delta_time_s: float
    run_gptq: PipelineResult = field(repr=False, default=None)  # type: ignore[assignment]
    run_rpiq: PipelineResult = field(repr=False, default=None)  # type: ignore[assignment]


def compare_methods(model, batches, cfg: QuantizeConfig) -> ComparisonReport:
    """Run stage-1-only and refined pipelines on the same inputs, diff them."""
    run_gptq = quantize_model(model, batches, replace(cfg, method="gptq"))
    run_rpiq = quantize_model(model, batches, replace(cfg, method="rpiq"))
    overhead = measure_overheads(run_gptq, run_rpiq)
    return ComparisonReport(
        config=cfg, rows=run_rpiq.layer_reports,
        delta_mem_bytes=overhead.delta_mem_bytes, delta_time_s=overhead.delta_time_s,
        run_gptq=run_gptq, run_rpiq=run_rpiq,
    )


def _layer_lines(rows) -> list[str]:
    lines = []
    for i, r in enumerate(rows):
        lines.extend([
            f"layer.{i}.name={r.name}",
            f"layer.{i}.gamma_stage1={r.gamma_stage1!r}",
            f"layer.{i}.gamma_final={r.gamma_final!r}",
            f"layer.{i}.reduction_pct={r.reduction_pct!r}",
            f"layer.{i}.iterations={r.iterations}",
            f"layer.{i}.stopped_early={int(r.stopped_early)}",
        ])
    return lines


def render_pipeline_report(result: PipelineResult) -> str:
    lines = ["report=quantize"]
    lines.extend(result.config.echo_lines())
    lines.extend(_layer_lines(result.layer_reports))
    lines.extend([
        f"totals.layers={len(result.layer_reports)}",
        f"totals.peak_bytes={result.peak_bytes}",
        f"totals.stage2_retained_bytes={result.stage2_retained_bytes}",
        f"totals.wall_seconds={result.wall_seconds:.6f}",
        f"totals.stage1_seconds={result.stage1_seconds:.6f}",
        f"totals.stage2_seconds={result.stage2_seconds:.6f}",
    ])
    return "\n".join(lines)


def render_comparison_report(report: ComparisonReport) -> str:
    lines = ["report=compare"]
    lines.extend(report.config.echo_lines())
    lines.extend(_layer_lines(report.rows))
    lines.extend([
        f"totals.layers={len(report.rows)}",
        f"totals.delta_mem_bytes={report.delta_mem_bytes}",
        f"totals.delta_time_seconds={report.delta_time_s:.6f}",
        f"totals.gptq_peak_bytes={report.run_gptq.peak_bytes}",
        f"totals.rpiq_peak_bytes={report.run_rpiq.peak_bytes}",
        f"totals.gptq_wall_seconds={report.run_gptq.wall_seconds:.6f}",
        f"totals.rpiq_wall_seconds={report.run_rpiq.wall_seconds:.6f}",
    ])
    return "\n".join(lines)


def write_report_csv(rows, path) -> None:
    """Per-layer summary: one row per layer, floats at full precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "gamma_stage1", "gamma_final", "reduction_pct",
                         "iterations", "stopped_early"])
        for r in rows:
            writer.writerow([r.name, repr(r.gamma_stage1), repr(r.gamma_final),
                             repr(r.reduction_pct), r.iterations, int(r.stopped_early)])


def write_trace_csv(traces: dict[str, RefinementTrace], path) -> None:
    """Convergence traces: one row per (layer, sweep index)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "t", "gamma"])
        for name, trace in traces.items():
            for t, g in enumerate(trace.gamma):
                writer.writerow([name, t, repr(g)])
