"""Gauss-Seidel blockwise refinement against a single calibration instance.

Each sweep visits the column blocks in ascending order. For block i the
directed residual adds the block's own contribution back into the global
output residual, a damped least-squares solve proposes new block weights, the
proposal is projected onto the quantization grid, and the block moves a step
alpha toward the projection. The running quantized output y_q is maintained
incrementally (subtract the block's old contribution, add the new one) so
later blocks inside the same sweep already see the update.

With alpha < 1 the iterate drifts off-grid between sweeps, so after every
sweep the current iterate is also projected and scored; the engine tracks the
best on-grid candidate seen (the stage-1 input included) and returns that
state, which keeps the reported final loss at or below the initial loss no
matter how the raw iterate behaves. The raw per-sweep loss drives the early
stop rule: once it fails to drop by a relative early_stop_tol, sweeping ends.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibration import BlockPartition, CalibrationSnapshot
from .errors import ArgumentError, ShapeError
from .gptq import Stage1Result
from .grid import QuantGrid, dequantize_columns, project_columns, quantize_columns, refit_columns
from .linalg import frobenius_sq, spd_solve


@dataclass
class RefineConfig:
    """Knobs for refine_layer.

    alpha: interpolation step toward each block's projected solution, (0, 1].
    t_max: sweep budget; 0 returns the stage-1 state untouched.
    early_stop_tol: relative loss-decrease threshold; None or negative
        disables early stopping.
    refit_grids: refit the grid of each block from the proposed solution
        before projecting (block_size must then be a multiple of group_size).
    project: identity projection when False; diagnostic mode only, the
        returned weights are then generally off-grid.
    """

    alpha: float = 0.01
    t_max: int = 5
    early_stop_tol: float | None = 1e-6
    refit_grids: bool = False
    project: bool = True


@dataclass
class RefinementState:
    """Mutable per-layer iteration state. Mutated in place by apply_block_update."""

    blocks: list[np.ndarray]        # block i is (c_out, c2_i - c1_i)
    x_blocks: tuple[np.ndarray, ...]
    y_q: np.ndarray                 # running quantized output, (n, c_out)
    y_q_blocks: list[np.ndarray]    # per-block contributions x_i @ b_i.T
    t: int = 0
    alpha: float = 1.0
    t_max: int = 0

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def retained_bytes(self) -> int:
        total = self.y_q.nbytes
        total += sum(b.nbytes for b in self.blocks)
        total += sum(y.nbytes for y in self.y_q_blocks)
        return int(total)


@dataclass(frozen=True)
class RefinementTrace:
    """Loss history of one refined layer.

    gamma[t] is the best on-grid loss achievable after t sweeps (index 0 is
    the stage-1 loss), so the sequence is non-increasing and its last entry is
    the loss of the returned state. gamma_sweep[t] is the raw loss of the
    mixed iterate after sweep t, the quantity the early-stop rule watches.
    """

    gamma: tuple[float, ...]
    gamma_sweep: tuple[float, ...]
    stopped_early: bool
    iterations: int
    total_reduction_pct: float

    @property
    def gamma_final(self) -> float:
        return self.gamma[-1]


@dataclass(frozen=True)
class RefineResult:
    w_refined: np.ndarray
    codes: np.ndarray | None
    grid: QuantGrid
    trace: RefinementTrace
    state_bytes: int = 0


def global_residual(y_orig, y_q) -> np.ndarray:
    """Residual of the quantized model on the calibration instance."""
    y_orig = np.asarray(y_orig, dtype=np.float64)
    y_q = np.asarray(y_q, dtype=np.float64)
    if y_orig.shape != y_q.shape:
        raise ShapeError(f"output shapes differ: {y_orig.shape} vs {y_q.shape}")
    return y_orig - y_q


def directed_residual(state: RefinementState, y_orig, i: int) -> np.ndarray:
    """Residual with block i's own contribution added back: the target its
    local solve should explain."""
    if not 0 <= i < state.n_blocks:
        raise ArgumentError(f"block index {i} outside [0, {state.n_blocks})")
    y_orig = np.asarray(y_orig, dtype=np.float64)
    if y_orig.shape != state.y_q.shape:
        raise ShapeError(f"output shapes differ: {y_orig.shape} vs {state.y_q.shape}")
    return y_orig - (state.y_q - state.y_q_blocks[i])


def solve_block(part: BlockPartition, i: int, d_i) -> np.ndarray:
    """Solve the block's damped normal equations for the directed residual.

    Returns the proposed block weights with shape (c_out, width_i).
    """
    if not 0 <= i < part.n_blocks:
        raise ArgumentError(f"block index {i} outside [0, {part.n_blocks})")
    d = np.asarray(d_i, dtype=np.float64)
    x_i = part.x_blocks[i]
    if d.ndim != 2 or d.shape[0] != x_i.shape[0]:
        raise ShapeError(f"residual shape {d.shape} does not match {x_i.shape[0]} batch rows")
    bt = spd_solve(part.factors[i], x_i.T @ d)
    return np.ascontiguousarray(bt.T)


def update_block(b_old, b_star, grid: QuantGrid | None, alpha: float,
                 col_start: int = 0) -> np.ndarray:
    """Interpolate from b_old toward the grid projection of b_star.

    grid None means identity projection (diagnostics). alpha == 1.0 returns
    the projection itself bit-exactly.
    """
    if not 0.0 < alpha <= 1.0:
        raise ArgumentError(f"alpha must be in (0, 1], got {alpha!r}")
    b_old = np.asarray(b_old, dtype=np.float64)
    b_star = np.asarray(b_star, dtype=np.float64)
    if b_old.shape != b_star.shape:
        raise ShapeError(f"block shapes differ: {b_old.shape} vs {b_star.shape}")
    if grid is None:
        b_tilde = b_star
    else:
        b_tilde = project_columns(b_star, grid, col_start)
    if alpha == 1.0:
        return np.ascontiguousarray(b_tilde)
    return b_old + alpha * (b_tilde - b_old)


def apply_block_update(state: RefinementState, i: int, b_new) -> RefinementState:
    """Swap block i's contribution out of y_q and the new one in."""
    if not 0 <= i < state.n_blocks:
        raise ArgumentError(f"block index {i} outside [0, {state.n_blocks})")
    b = np.asarray(b_new, dtype=np.float64)
    if b.shape != state.blocks[i].shape:
        raise ShapeError(f"block {i} shape {state.blocks[i].shape} != update {b.shape}")
    contrib = state.x_blocks[i] @ b.T
    state.y_q = state.y_q - state.y_q_blocks[i] + contrib
    state.y_q_blocks[i] = contrib
    state.blocks[i] = b
    return state


def init_state(w_init, part: BlockPartition, alpha: float = 1.0,
               t_max: int = 0) -> RefinementState:
    """Build the iteration state for a layer starting from its stage-1 weights."""
    w = np.asarray(w_init, dtype=np.float64)
    blocks = [np.ascontiguousarray(w[:, c1:c2]) for c1, c2 in part.ranges]
    y_q_blocks = [x_i @ b.T for x_i, b in zip(part.x_blocks, blocks)]
    n = part.x_blocks[0].shape[0] if part.n_blocks else 0
    y_q = np.zeros((n, w.shape[0]), dtype=np.float64)
    for contrib in y_q_blocks:
        y_q += contrib
    return RefinementState(
        blocks=blocks, x_blocks=part.x_blocks, y_q=y_q, y_q_blocks=y_q_blocks,
        t=0, alpha=alpha, t_max=t_max,
    )


def _reduction_pct(gamma_init: float, gamma_final: float) -> float:
    if gamma_init == 0.0:
        return 0.0
    return 100.0 * (gamma_init - gamma_final) / gamma_init


def refine_layer(stage1: Stage1Result, snapshot: CalibrationSnapshot,
                 part: BlockPartition, cfg: RefineConfig) -> RefineResult:
    """Run up to cfg.t_max Gauss-Seidel sweeps and return the best on-grid state.

    Args:
        stage1: quantized initialization for this layer.
        snapshot: calibration instance the loss is measured on.
        part: column blocks with their curvature factors.
        cfg: sweep budget, step size, stopping rule.

    Returns:
        RefineResult whose trace always satisfies gamma[-1] <= gamma[0].
    """
    if not 0.0 < cfg.alpha <= 1.0:
        raise ArgumentError(f"alpha must be in (0, 1], got {cfg.alpha!r}")
    if cfg.t_max < 0:
        raise ArgumentError(f"t_max must be >= 0, got {cfg.t_max}")
    if cfg.refit_grids and not cfg.project:
        raise ArgumentError("refit_grids has no effect with projection disabled")

    grid = stage1.grid
    gamma0 = stage1.recon_error
    best_loss = gamma0
    best_w = stage1.w_init
    best_codes: np.ndarray | None = stage1.codes
    best_grid = grid
    gammas = [gamma0]
    raw = [gamma0]
    stopped = False

    if cfg.t_max > 0:
        state = init_state(stage1.w_init, part, alpha=cfg.alpha, t_max=cfg.t_max)
        state_bytes = state.retained_bytes()
        sweeps = 0
        while sweeps < cfg.t_max:
            if raw[-1] == 0.0:
                stopped = True  # already at the loss floor, nothing to sweep for
                break
            for i in range(part.n_blocks):
                c1, _ = part.ranges[i]
                d_i = directed_residual(state, snapshot.y_orig, i)
                b_star = solve_block(part, i, d_i)
                if cfg.project and cfg.refit_grids:
                    grid = refit_columns(grid, b_star, c1)
                b_new = update_block(
                    state.blocks[i], b_star, grid if cfg.project else None,
                    cfg.alpha, col_start=c1,
                )
                apply_block_update(state, i, b_new)
            sweeps += 1
            state.t = sweeps
            raw.append(frobenius_sq(snapshot.y_orig - state.y_q))

            w_cur = np.concatenate(state.blocks, axis=1)
            if cfg.project:
                cand_codes = quantize_columns(w_cur, grid)
                cand_w = dequantize_columns(cand_codes, grid)
            else:
                cand_codes = None
                cand_w = w_cur
            cand_loss = frobenius_sq(snapshot.y_orig - snapshot.x_orig @ cand_w.T)
            if cand_loss < best_loss:
                best_loss = cand_loss
                best_w = cand_w
                best_codes = cand_codes
                best_grid = grid
            gammas.append(min(gammas[-1], cand_loss))

            tol = cfg.early_stop_tol
            if tol is not None and tol >= 0.0:
                prev, cur = raw[-2], raw[-1]
                if prev == 0.0 or (prev - cur) <= tol * prev:
                    stopped = True
                    break
        state_bytes = max(state_bytes, state.retained_bytes())
        iterations = sweeps
    else:
        state_bytes = 0
        iterations = 0

    trace = RefinementTrace(
        gamma=tuple(gammas),
        gamma_sweep=tuple(raw),
        stopped_early=stopped and iterations < cfg.t_max,
        iterations=iterations,
        total_reduction_pct=_reduction_pct(gamma0, gammas[-1]),
    )
    return RefineResult(
        w_refined=best_w, codes=best_codes, grid=best_grid, trace=trace,
        state_bytes=state_bytes,
    )
