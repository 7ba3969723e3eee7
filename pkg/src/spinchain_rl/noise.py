"""Hamiltonian perturbations and shot-noise readout.

Two corruptions are modelled: a random symmetric tridiagonal perturbation of
the Hamiltonian (uncertain biases and couplings), and a binomial estimate of
the fidelity from a finite number of single-shot measurements. Both take an
explicit ``numpy.random.Generator``; nothing here touches global RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import ContractError, tridiagonal


@dataclass(frozen=True)
class NoiseConfig:
    """``sigma_noise`` is a standard deviation; ``shots == 0`` means exact readout."""

    sigma_noise: float = 0.0
    shots: int = 0

    def __post_init__(self):
        if self.sigma_noise < 0:
            raise ContractError(f"sigma_noise must be >= 0, got {self.sigma_noise}")
        if self.shots < 0:
            raise ContractError(f"shots must be >= 0, got {self.shots}")

    @property
    def noiseless(self) -> bool:
        return self.sigma_noise == 0 and self.shots == 0


def direction_dimension(n_spins: int) -> int:
    """Free entries of a symmetric tridiagonal N x N matrix: N + (N - 1)."""
    return 2 * n_spins - 1


def direction_to_matrix(direction, n_spins: int) -> np.ndarray:
    """Map a ``2N - 1`` vector (diagonal first, then couplings) to a matrix."""
    direction = np.asarray(direction, dtype=float)
    if direction.shape != (direction_dimension(n_spins),):
        raise ContractError(
            f"direction has shape {direction.shape}, expected ({direction_dimension(n_spins)},)"
        )
    return tridiagonal(direction[:n_spins], direction[n_spins:])


def sample_structured_perturbation(
    n_spins: int, sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """Symmetric tridiagonal matrix with i.i.d. N(0, sigma^2) free entries."""
    if sigma < 0:
        raise ContractError(f"sigma must be >= 0, got {sigma}")
    entries = rng.normal(0.0, 1.0, direction_dimension(n_spins)) * sigma
    return direction_to_matrix(entries, n_spins)


def coarse_grain_fidelity(true_f: float, shots: int, rng: np.random.Generator) -> float:
    """Fraction of ``shots`` successes with success probability ``true_f``."""
    if not 0.0 <= true_f <= 1.0:
        raise ContractError(f"fidelity {true_f} outside [0, 1]")
    if shots == 0:
        return true_f
    return rng.binomial(shots, true_f) / shots


def sample_sphere_direction(n_spins: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform unit vector in dimension ``2N - 1``."""
    if n_spins < 2:
        raise ContractError("need at least two spins")
    v = rng.standard_normal(direction_dimension(n_spins))
    return v / np.linalg.norm(v)


def perturbed_hamiltonian(H: np.ndarray, direction, strength: float) -> np.ndarray:
    """``H + strength * P`` where ``P`` is the matrix form of ``direction``."""
    H = np.asarray(H, dtype=float)
    return H + strength * direction_to_matrix(direction, H.shape[0])
