"""Matplotlib figures for the report subcommand (Agg backend, PNG output)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}
COLORS = {"lbfgs": "tab:blue", "ppo": "tab:orange", "random": "tab:gray"}
LABELS = {"lbfgs": "L-BFGS", "ppo": "PPO", "random": "random"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_cost(rows: Sequence[dict], path, x: str = "n_spins") -> Path:
    """Median env calls with interquartile bars, one line per algorithm."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for alg in sorted({r["algorithm"] for r in rows}):
            sel = sorted((r for r in rows if r["algorithm"] == alg), key=lambda r: r[x])
            xs = np.array([r[x] for r in sel], dtype=float)
            med = np.array([r["median_calls"] for r in sel])
            lo = med - np.array([r["q1_calls"] for r in sel])
            hi = np.array([r["q3_calls"] for r in sel]) - med
            ax.errorbar(xs, med, yerr=[lo, hi], marker="o", capsize=3,
                        color=COLORS.get(alg), label=LABELS.get(alg, alg))
        ax.set_yscale("log")
        ax.set_xlabel("chain length N" if x == "n_spins" else "perturbation noise")
        ax.set_ylabel("environment calls")
        ax.legend()
        return _save(fig, path)


def plot_true_fidelity(records, path, x: str = "n_spins") -> Path:
    """Perceived vs true fidelity of the returned controllers."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        algs = sorted({r.algorithm for r in records})
        width = 0.8 / max(len(algs), 1)
        for k, alg in enumerate(algs):
            sel = [r for r in records if r.algorithm == alg]
            xs = np.array([getattr(r, x) for r in sel], dtype=float)
            grid = np.unique(xs)
            step = np.min(np.diff(grid)) if grid.size > 1 else 1.0
            offset = (k - (len(algs) - 1) / 2) * width * step
            ax.scatter(xs + offset, [r.true_fidelity for r in sel], s=8, alpha=0.6,
                       color=COLORS.get(alg), label=f"{LABELS.get(alg, alg)} true")
            ax.scatter(xs + offset, [r.perceived_fidelity for r in sel], s=8, marker="x",
                       alpha=0.6, color=COLORS.get(alg))
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel("chain length N" if x == "n_spins" else "perturbation noise")
        ax.set_ylabel("fidelity (dots true, crosses perceived)")
        ax.legend()
        return _save(fig, path)


def plot_mcra(levels: Sequence[float], samples: Sequence[np.ndarray], path,
              title: str = "") -> Path:
    """Tukey box plots of pooled fidelities per noise level."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.boxplot([np.ravel(s) for s in samples], whis=1.5,
                   tick_labels=[f"{v:.3f}" for v in levels])
        ax.set_xlabel("perturbation noise")
        ax.set_ylabel("fidelity")
        ax.tick_params(axis="x", rotation=45)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_sphere(strengths: np.ndarray, curves: np.ndarray, path, max_curves: int = 200,
                title: str = "") -> Path:
    """Fidelity along random perturbation directions, plus the pointwise median."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for c in curves[:max_curves]:
            ax.plot(strengths, c, color="tab:blue", lw=0.4, alpha=0.25)
        ax.plot(strengths, np.median(curves, axis=0), color="k", lw=1.5, label="median")
        ax.set_xlabel("perturbation strength")
        ax.set_ylabel("fidelity")
        ax.legend()
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_densities(edges: np.ndarray, densities: dict[float, np.ndarray], path,
                   title: str = "") -> Path:
    centers = 0.5 * (edges[1:] + edges[:-1])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        cmap = plt.get_cmap("viridis")
        keys = sorted(densities)
        for i, s in enumerate(keys):
            ax.plot(centers, densities[s], color=cmap(i / max(len(keys) - 1, 1)), lw=0.8)
        sm = plt.cm.ScalarMappable(cmap=cmap, norm=plt.Normalize(min(keys), max(keys)))
        fig.colorbar(sm, ax=ax, label="perturbation strength")
        ax.set_xlabel("fidelity")
        ax.set_ylabel("density")
        if title:
            ax.set_title(title)
        return _save(fig, path)
