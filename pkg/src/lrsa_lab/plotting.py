"""Figure rendering for the report paths.

Every reporting command that writes a delimited file also renders a PNG
next to it. matplotlib is imported lazily with the Agg backend so the
package works headless and nothing ever opens a window.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_decay_figure(report, path) -> None:
    """Log-log singular value decay plus rank-truncation error curve."""
    plt = _pyplot()
    sigma = np.asarray(report.singular_values)
    k = np.arange(1, sigma.size + 1)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    positive = sigma > 0
    ax1.loglog(k[positive], sigma[positive], marker=".", lw=1)
    ax1.set_xlabel("k")
    ax1.set_ylabel(r"$\sigma_k$")
    ax1.set_title("singular value decay")
    ranks = sorted(report.rank_errors)
    errs = [report.rank_errors[r] for r in ranks]
    ax2.semilogy(ranks, [max(e, 1e-18) for e in errs], marker=".", lw=1)
    ax2.set_xlabel("rank r")
    ax2.set_ylabel("relative Frobenius error")
    ax2.set_title(f"numerical rank {report.numerical_rank}")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=150, bbox_inches="tight")
    plt.close(fig)


def save_history_figure(history: list[dict], path) -> None:
    """Training curves: loss and test error on the left axis, lr on the right."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if history:
        epochs = [row["epoch"] for row in history]
        ax.semilogy(epochs, [row["train_loss"] for row in history], label="train loss")
        test = [row["test_rel_l2"] for row in history]
        if np.all(np.isfinite(test)):
            ax.semilogy(epochs, test, label="test rel L2")
        ax2 = ax.twinx()
        ax2.plot(epochs, [row["lr"] for row in history], color="grey", lw=0.8, alpha=0.6)
        ax2.set_ylabel("lr")
    ax.set_xlabel("epoch")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=150, bbox_inches="tight")
    plt.close(fig)


def save_bench_figure(rows: list[dict], path) -> None:
    """Coupling FLOPs for the block vs the dense reference over N."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ns = [row["n"] for row in rows]
    ax.loglog(ns, [row["coupling_flops"] for row in rows], marker="o", label="block")
    ax.loglog(
        ns, [row["dense_flops"] for row in rows], marker="s", ls="--", label="dense attention"
    )
    ax.set_xlabel("points N")
    ax.set_ylabel("coupling FLOPs")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=150, bbox_inches="tight")
    plt.close(fig)
