"""Monte Carlo robustness analysis and perturbation-sphere scans.

Both studies evaluate fixed controllers on perturbed Hamiltonians with exact
(noise-free) readout. The MCRA pools fidelities across controllers and
repeats at graded noise levels; the sphere scan traces fidelity along
random unit directions in the space of symmetric tridiagonal perturbations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .dynamics import (
    ChainSpec,
    ContractError,
    Controller,
    build_hamiltonian,
    fidelity,
    hamiltonian_fidelity,
)
from .noise import direction_dimension, direction_to_matrix, sample_structured_perturbation

DEFAULT_LEVELS = tuple(0.1 * k / 9 for k in range(10))
DEFAULT_STRENGTHS = tuple(np.linspace(-0.1, 0.1, 41))
SLOPE_STEP = 1e-5
SLOPE_TOL = 1e-4


@dataclass(frozen=True)
class BoxStats:
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple[float, ...]

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def boxplot_stats(samples) -> BoxStats:
    """Tukey box statistics: linear-interpolated quartiles, 1.5 IQR whiskers."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if x.size == 0:
        raise ContractError("boxplot_stats needs at least one sample")
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo_fence) & (x <= hi_fence)]
    outliers = x[(x < lo_fence) | (x > hi_fence)]
    return BoxStats(
        median=float(med),
        q1=float(q1),
        q3=float(q3),
        whisker_low=float(inside.min()),
        whisker_high=float(inside.max()),
        outliers=tuple(float(v) for v in outliers),
    )


@dataclass
class FidelityDistribution:
    sigma: float
    samples: np.ndarray  # shape (n_controllers, repeats)
    box: BoxStats = field(init=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        self.box = boxplot_stats(self.samples)

    @property
    def pooled(self) -> np.ndarray:
        return self.samples.ravel()


def run_mcra(controllers: Sequence[Controller], spec: ChainSpec, rng: np.random.Generator,
             repeats: int = 10, levels: Sequence[float] = DEFAULT_LEVELS) -> list[FidelityDistribution]:
    """Pooled fidelity distributions of ``controllers`` at each noise level.

    For each level, each controller is evaluated on ``repeats`` independently
    perturbed Hamiltonians (perturbation entries with standard deviation
    equal to the level) with exact readout.
    """
    if not controllers:
        raise ContractError("run_mcra needs at least one controller")
    out = []
    for sigma in levels:
        samples = np.empty((len(controllers), repeats))
        for i, ctrl in enumerate(controllers):
            H = build_hamiltonian(spec, ctrl)
            for r in range(repeats):
                P = sample_structured_perturbation(spec.n_spins, sigma, rng)
                samples[i, r] = hamiltonian_fidelity(H + P, ctrl.read_time, spec.source,
                                                     spec.target)
        out.append(FidelityDistribution(float(sigma), samples))
    return out


def _batched_fidelity(H: np.ndarray, t: float, source: int, target: int) -> np.ndarray:
    lam, V = np.linalg.eigh(H)
    a = np.sum(V[..., target, :] * np.exp(-1j * lam * t) * V[..., source, :], axis=-1)
    return np.minimum(1.0, a.real**2 + a.imag**2)


def median_trend(distributions: Sequence[FidelityDistribution]) -> float:
    """Spearman rank correlation between noise level and median fidelity.

    Returns 0.0 when the medians are all equal (no trend).
    """
    sig = [d.sigma for d in distributions]
    med = [d.box.median for d in distributions]
    if np.ptp(med) == 0:
        return 0.0
    return float(stats.spearmanr(sig, med).statistic)


def select_most_robust(controllers: Sequence[Controller],
                       distributions: Sequence[FidelityDistribution]) -> int:
    """Index of the controller with the highest median over all its pooled samples."""
    per_ctrl = np.concatenate([d.samples for d in distributions], axis=1)
    return int(np.argmax(np.median(per_ctrl, axis=1)))


@dataclass
class SphereScan:
    directions: np.ndarray  # (n_directions, 2N - 1)
    strengths: np.ndarray  # (n_strengths,)
    curves: np.ndarray  # (n_directions, n_strengths)
    slopes: np.ndarray  # central-difference slope at zero strength, per direction
    densities: dict[float, np.ndarray]
    bin_edges: np.ndarray

    def improving_fraction(self, tol: float = SLOPE_TOL) -> float:
        """Fraction of directions along which fidelity rises to first order."""
        return float(np.mean(self.slopes > tol))

    def stationary_fraction(self, tol: float = SLOPE_TOL) -> float:
        return float(np.mean(np.abs(self.slopes) <= tol))


def sphere_scan(controller: Controller, spec: ChainSpec, rng: np.random.Generator,
                n_directions: int = 1000, strengths: Sequence[float] = DEFAULT_STRENGTHS,
                density_strengths: Sequence[float] | None = None, bins: int = 50) -> SphereScan:
    """Fidelity of ``H + delta * P`` along uniformly random unit directions ``P``.

    Slopes at zero strength are central differences with step ``SLOPE_STEP``.
    """
    dim = direction_dimension(spec.n_spins)
    D = rng.standard_normal((n_directions, dim))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    strengths = np.asarray(strengths, dtype=float)
    H = build_hamiltonian(spec, controller)
    P = np.stack([direction_to_matrix(d, spec.n_spins) for d in D])
    t = controller.read_time
    curves = np.empty((n_directions, strengths.size))
    for j, delta in enumerate(strengths):
        curves[:, j] = _batched_fidelity(H + delta * P, t, spec.source, spec.target)
    # exact value at zero strength is shared by every direction
    zero = np.isclose(strengths, 0.0, atol=0.0)
    if zero.any():
        curves[:, zero] = fidelity(spec, controller)
    up = _batched_fidelity(H + SLOPE_STEP * P, t, spec.source, spec.target)
    down = _batched_fidelity(H - SLOPE_STEP * P, t, spec.source, spec.target)
    slopes = (up - down) / (2 * SLOPE_STEP)
    if density_strengths is None:
        density_strengths = strengths
    edges = np.linspace(0.0, 1.0, bins + 1)
    densities = {}
    for s in density_strengths:
        j = int(np.argmin(np.abs(strengths - s)))
        hist, _ = np.histogram(curves[:, j], bins=edges, density=True)
        densities[float(strengths[j])] = hist
    return SphereScan(D, strengths, curves, slopes, densities, edges)


# ---------------------------------------------------------------------------
# CSV export


def write_mcra_csv(path, distributions: Sequence[FidelityDistribution]) -> Path:
    """One row per sample: controller id, noise level, repeat, fidelity."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["controller_id", "sigma", "repeat", "fidelity"])
        for d in distributions:
            for i, row in enumerate(d.samples):
                for r, f in enumerate(row):
                    w.writerow([i, repr(d.sigma), r, repr(float(f))])
    return path


def write_box_csv(path, distributions: Sequence[FidelityDistribution]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma", "n", "median", "q1", "q3", "whisker_low", "whisker_high",
                    "n_outliers"])
        for d in distributions:
            b = d.box
            w.writerow([repr(d.sigma), d.samples.size, repr(b.median), repr(b.q1), repr(b.q3),
                        repr(b.whisker_low), repr(b.whisker_high), len(b.outliers)])
    return path


def write_sphere_csv(path, scan: SphereScan) -> Path:
    """Direction x strength matrix of fidelities; header carries the strengths."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["direction"] + [repr(float(s)) for s in scan.strengths] + ["slope_at_zero"])
        for i, (curve, slope) in enumerate(zip(scan.curves, scan.slopes)):
            w.writerow([i] + [repr(float(f)) for f in curve] + [repr(float(slope))])
    return path
