"""Single-excitation dynamics of an XX spin chain under static bias control.

Everything here works in units with hbar = 1: biases and couplings in rad/s,
times in seconds. The propagator is built from the symmetric
eigendecomposition of the tridiagonal Hamiltonian, which also gives the
analytic fidelity gradient through the divided-difference (Loewner) matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DELTA_LIMIT = 10.0
TIME_LIMIT = 30.0
DEGENERACY_TOL = 1e-10


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True)
class ChainSpec:
    """A spin-chain transfer problem: chain length, couplings and endpoints.

    ``source`` and ``target`` are 0-based site indices. Equal endpoints are
    accepted for diagnostics.
    """

    n_spins: int
    couplings: tuple[float, ...] = field(default=())
    source: int = 0
    target: int = 1

    def __post_init__(self):
        if int(self.n_spins) < 2:
            raise ContractError(f"n_spins must be at least 2, got {self.n_spins}")
        couplings = tuple(float(c) for c in self.couplings)
        if not couplings:
            couplings = (1.0,) * (self.n_spins - 1)
        if len(couplings) != self.n_spins - 1:
            raise ContractError(
                f"expected {self.n_spins - 1} couplings, got {len(couplings)}"
            )
        object.__setattr__(self, "couplings", couplings)
        for name in ("source", "target"):
            idx = getattr(self, name)
            if not 0 <= idx < self.n_spins:
                raise ContractError(f"{name}={idx} outside [0, {self.n_spins})")

    @classmethod
    def uniform(cls, n_spins: int, source: int = 0, target: int = 2) -> "ChainSpec":
        return cls(n_spins=n_spins, source=source, target=target)


@dataclass(frozen=True)
class Controller:
    """Static bias vector ``delta`` (rad/s) and readout time ``read_time`` (s)."""

    delta: tuple[float, ...]
    read_time: float

    def __post_init__(self):
        delta = tuple(np.asarray(self.delta, dtype=float).ravel().tolist())
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "read_time", float(self.read_time))

    @classmethod
    def from_vector(cls, x) -> "Controller":
        """Build from a flat ``(delta_1..delta_N, T)`` vector."""
        x = np.asarray(x, dtype=float).tolist()
        return cls(tuple(x[:-1]), x[-1])

    def as_vector(self) -> np.ndarray:
        return np.append(np.asarray(self.delta), self.read_time)

    def within_bounds(self) -> bool:
        d = np.asarray(self.delta)
        return bool(
            np.all(np.abs(d) <= DELTA_LIMIT) and 0.0 < self.read_time <= TIME_LIMIT
        )


@dataclass(frozen=True)
class EigenSystem:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _check_dims(spec: ChainSpec, ctrl: Controller) -> None:
    if len(ctrl.delta) != spec.n_spins:
        raise ContractError(
            f"controller has {len(ctrl.delta)} biases for a {spec.n_spins}-spin chain"
        )


def tridiagonal(diagonal, offdiagonal) -> np.ndarray:
    """Dense symmetric tridiagonal matrix from its diagonal and off-diagonal."""
    diagonal = np.asarray(diagonal, dtype=float)
    offdiagonal = np.asarray(offdiagonal, dtype=float)
    if offdiagonal.shape[0] != diagonal.shape[0] - 1:
        raise ContractError("off-diagonal must be one shorter than the diagonal")
    n = diagonal.shape[0]
    H = np.zeros((n, n))
    H.flat[:: n + 1] = diagonal
    H.flat[1 :: n + 1] = offdiagonal
    H.flat[n :: n + 1] = offdiagonal
    return H


def build_hamiltonian(spec: ChainSpec, ctrl: Controller) -> np.ndarray:
    """Single-excitation Hamiltonian: biases on the diagonal, couplings beside it."""
    _check_dims(spec, ctrl)
    return tridiagonal(ctrl.delta, spec.couplings)


def eigendecompose(H: np.ndarray) -> EigenSystem:
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ContractError(f"Hamiltonian must be square, got shape {H.shape}")
    if not np.array_equal(H, H.T):
        raise ContractError("Hamiltonian must be symmetric")
    lam, V = np.linalg.eigh(H)
    return EigenSystem(lam, V)


def evolve_state(es: EigenSystem, t: float, psi0) -> np.ndarray:
    """Propagate ``psi0`` for time ``t`` under the Hamiltonian of ``es``."""
    psi0 = np.asarray(psi0, dtype=complex)
    if abs(np.linalg.norm(psi0) - 1.0) > 1e-12:
        raise ContractError("initial state must be normalized")
    if t < 0:
        raise ContractError("evolution time must be non-negative")
    V = es.eigenvectors
    phases = np.exp(-1j * es.eigenvalues * t)
    return V @ (phases * (V.T @ psi0))


def transfer_amplitude(es: EigenSystem, t: float, source: int, target: int) -> complex:
    V = es.eigenvectors
    return complex(np.sum(V[target] * np.exp(-1j * es.eigenvalues * t) * V[source]))


def hamiltonian_fidelity(H: np.ndarray, t: float, source: int, target: int) -> float:
    """Transfer fidelity for an arbitrary symmetric Hamiltonian (e.g. perturbed)."""
    lam, V = np.linalg.eigh(H)
    a = np.sum(V[target] * np.exp(-1j * lam * t) * V[source])
    return float(min(1.0, a.real**2 + a.imag**2))


def fidelity(spec: ChainSpec, ctrl: Controller) -> float:
    """|<target| exp(-i H T) |source>|^2 for the controlled chain."""
    H = build_hamiltonian(spec, ctrl)
    return hamiltonian_fidelity(H, ctrl.read_time, spec.source, spec.target)


def loewner_matrix(lam: np.ndarray, t: float) -> np.ndarray:
    """Divided differences of ``x -> exp(-i x t)`` over the spectrum ``lam``."""
    f = np.exp(-1j * lam * t)
    diff = lam[:, None] - lam[None, :]
    degenerate = np.abs(diff) < DEGENERACY_TOL
    safe = np.where(degenerate, 1.0, diff)
    gamma = (f[:, None] - f[None, :]) / safe
    confluent = -1j * t * np.broadcast_to(f[:, None], gamma.shape)
    return np.where(degenerate, confluent, gamma)


def hamiltonian_fidelity_and_gradient(H: np.ndarray, t: float, source: int, target: int):
    """Fidelity and its derivatives for a symmetric tridiagonal ``H``.

    Returns ``(F, dF/d diag, dF/d offdiag, dF/dt)`` where the off-diagonal
    derivative moves both symmetric entries together.
    """
    lam, V = np.linalg.eigh(H)
    phases = np.exp(-1j * lam * t)
    vt, vs = V[target], V[source]
    a = np.sum(vt * phases * vs)
    # da/dH_E = sum_kl vt_k Gamma_kl (V^T E V)_kl vs_l
    M = (vt[:, None] * loewner_matrix(lam, t)) * vs[None, :]
    W = V @ M @ V.T
    grad_diag = 2.0 * np.real(np.conj(a) * np.diag(W))
    off = np.diag(W, 1) + np.diag(W, -1)
    grad_off = 2.0 * np.real(np.conj(a) * off)
    da_dt = np.sum(vt * (-1j * lam) * phases * vs)
    grad_t = 2.0 * np.real(np.conj(a) * da_dt)
    F = float(min(1.0, a.real**2 + a.imag**2))
    return F, grad_diag, grad_off, float(grad_t)


def fidelity_and_gradient(spec: ChainSpec, ctrl: Controller) -> tuple[float, np.ndarray]:
    """Fidelity and ``(dF/dDelta_1..N, dF/dT)`` from one eigendecomposition."""
    H = build_hamiltonian(spec, ctrl)
    F, g_diag, _, g_t = hamiltonian_fidelity_and_gradient(
        H, ctrl.read_time, spec.source, spec.target
    )
    return F, np.append(g_diag, g_t)


def fidelity_gradient(spec: ChainSpec, ctrl: Controller) -> np.ndarray:
    return fidelity_and_gradient(spec, ctrl)[1]
