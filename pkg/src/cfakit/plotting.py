"""PNG figures rendered next to the CSV outputs of the command line.

Uses the non-interactive Agg backend, so nothing here needs a display.
Each function takes already-computed numbers and a target path; none of
them recompute results.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}

# no timestamps or version strings, so reruns give identical files
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_spectrum(eigenvalues, d: int, path, residual: float | None = None) -> Path:
    """Eigenvalues of the normalized co-occurrence matrix, kept rank shaded."""
    ev = np.asarray(eigenvalues, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        idx = np.arange(1, ev.size + 1)
        ax.plot(idx, ev, marker=".", lw=1, color="C0")
        ax.axvspan(0.5, min(d, ev.size) + 0.5, color="C1", alpha=0.15, label=f"kept (d={d})")
        ax.set_xlabel("eigenvalue index")
        ax.set_ylabel("eigenvalue")
        if residual is not None:
            ax.set_title(f"Eckart-Young residual {residual:.4g}")
        ax.legend(loc="upper right")
        return _save(fig, path)


def plot_loss_trace(trace, path) -> Path:
    """Total, recon and KL per step; the KL goes on a twin axis when non-zero."""
    arr = np.asarray([row[:5] for row in trace], dtype=float).reshape(-1, 5)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(arr[:, 0], arr[:, 2], lw=1, label="total", color="C0")
        ax.plot(arr[:, 0], arr[:, 3], lw=1, label="recon", color="C2", alpha=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        if arr.size and np.any(arr[:, 4] != 0):
            ax2 = ax.twinx()
            ax2.plot(arr[:, 0], arr[:, 4], lw=1, color="C3", alpha=0.7, label="kl")
            ax2.set_ylabel("kl", color="C3")
            ax2.grid(False)
        ax.legend(loc="upper right")
        return _save(fig, path)


def plot_buckets(rows, spearman: float, path) -> Path:
    """Bucket accuracy against bucket index, low entropy on the left."""
    rows = list(rows)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        b = [r[0] for r in rows]
        acc = [r[3] for r in rows]
        ax.bar(b, acc, color="C0", alpha=0.8)
        for x, r in zip(b, rows):
            ax.annotate(f"H={r[2]:.2f}", (x, r[3]), ha="center", va="bottom", fontsize=7)
        ax.set_xticks(b)
        ax.set_xlabel("entropy bucket (ascending)")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1.08)
        ax.set_title(f"Spearman rho = {spearman:.3f}")
        return _save(fig, path)


def plot_pavpu(rows, path) -> Path:
    """PAvPU@M and top-1 accuracy for each M."""
    rows = list(rows)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ms = [m for m, _ in rows]
        ax.plot(ms, [c.pavpu for _, c in rows], marker="o", label="PAvPU@M")
        ax.plot(ms, [c.top1 for _, c in rows], ls="--", color="k", label="top-1")
        ax.set_xlabel("M (samples flagged uncertain)")
        ax.set_ylabel("score")
        ax.legend(loc="lower left")
        return _save(fig, path)


def plot_sepin(per_dim, ranking, k: int, path) -> Path:
    """Per-dimension conditional MI in ranked order, top-k highlighted."""
    vals = np.asarray(per_dim, dtype=float)[np.asarray(ranking, dtype=int)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        colors = ["C1" if i < k else "C0" for i in range(vals.size)]
        ax.bar(np.arange(vals.size), vals, color=colors)
        ax.set_xticks(np.arange(vals.size), [str(r) for r in ranking], fontsize=7)
        ax.set_xlabel("latent dimension (ranked)")
        ax.set_ylabel("conditional MI (nats)")
        ax.set_title(f"SEPIN@{k} = {vals[:k].mean():.3f}" if vals.size else "SEPIN")
        return _save(fig, path)
