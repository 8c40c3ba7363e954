"""Matplotlib rendering for convergence traces and method comparisons."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_convergence_plot(traces: dict, path, title: str = "Refinement convergence") -> None:
    """Line plot of the per-layer loss trace, one series per layer."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    positive = True
    for name, gammas in traces.items():
        gammas = list(gammas)
        ax.plot(range(len(gammas)), gammas, marker="o", markersize=3.5,
                linewidth=1.4, label=name)
        if any(g <= 0.0 for g in gammas):
            positive = False
    if positive and traces:
        ax.set_yscale("log")
    ax.set_xlabel("sweep")
    ax.set_ylabel("output residual loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if 0 < len(traces) <= 12:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_comparison_plot(rows, path, title: str = "Loss reduction by layer") -> None:
    """Horizontal bars of the per-layer reduction achieved by refinement."""
    names = [r.name for r in rows]
    reductions = [r.reduction_pct for r in rows]
    height = max(2.4, 0.5 * len(names) + 1.4)
    fig, ax = plt.subplots(figsize=(6.4, height))
    ypos = range(len(names))
    ax.barh(list(ypos), reductions, color="#4878cf")
    ax.set_yticks(list(ypos))
    ax.set_yticklabels(names, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("loss reduction (%)")
    ax.set_title(title)
    ax.grid(True, axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
