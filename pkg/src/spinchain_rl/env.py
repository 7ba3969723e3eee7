"""Model-agnostic control environment for the spin-chain transfer problem.

The agent sees only the current control parameters and a (possibly noisy)
fidelity reward. Every reward evaluation is metered; the counter is the cost
unit shared by all optimizers in this package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    DELTA_LIMIT,
    TIME_LIMIT,
    ChainSpec,
    ContractError,
    Controller,
    build_hamiltonian,
    hamiltonian_fidelity,
    hamiltonian_fidelity_and_gradient,
)
from .noise import NoiseConfig, coarse_grain_fidelity, sample_structured_perturbation

TIME_EPS = 1e-6


def wrap_delta(x):
    """Wrap biases into ``[-10, 10)``."""
    d = np.mod(np.asarray(x, dtype=float) + DELTA_LIMIT, 2 * DELTA_LIMIT) - DELTA_LIMIT
    # mod of a tiny negative number can round up to the period
    return np.where(d >= DELTA_LIMIT, -DELTA_LIMIT, d)


def wrap_time(t):
    """Wrap readout times into ``(0, 30]`` (offset by ``TIME_EPS`` to avoid 0)."""
    w = np.mod(np.asarray(t, dtype=float) - TIME_EPS, TIME_LIMIT) + TIME_EPS
    # times in (0, eps) land just above the limit
    return np.minimum(w, TIME_LIMIT)


def wrap_controller(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.append(wrap_delta(x[:-1]), wrap_time(x[-1]))


def random_controller_vector(n_spins: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw: biases on [-10, 10], readout time on (0, 30]."""
    delta = rng.uniform(-DELTA_LIMIT, DELTA_LIMIT, n_spins)
    # uniform on [0, 30) mapped to (0, 30]
    t = TIME_LIMIT - rng.uniform(0.0, TIME_LIMIT)
    return np.append(delta, t)


@dataclass(frozen=True)
class EnvConfig:
    spec: ChainSpec
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    reward_threshold: float = 0.99
    steps_per_epoch: int = 128
    delta_limit: float = DELTA_LIMIT
    time_limit: float = TIME_LIMIT
    action_scale: float = 1.0
    time_action_scale: float = 3.0

    def __post_init__(self):
        if not 0.0 < self.reward_threshold <= 1.0 and self.reward_threshold != 0.0:
            raise ContractError(f"reward_threshold {self.reward_threshold} outside (0, 1]")

    @property
    def n_spins(self) -> int:
        return self.spec.n_spins

    @property
    def action_scales(self) -> np.ndarray:
        return np.append(np.full(self.n_spins, self.action_scale), self.time_action_scale)

    @property
    def step_bounds(self) -> np.ndarray:
        return np.append(np.full(self.n_spins, self.delta_limit / 2), self.time_limit / 2)


@dataclass(frozen=True)
class StepOutcome:
    next_state: Controller
    reward: float
    done: bool

    @property
    def perceived_fidelity(self) -> float:
        return self.reward


class SpinChainEnv:
    """Stateful wrapper that owns the current controller and the call counter.

    Example:
        >>> env = SpinChainEnv(EnvConfig(ChainSpec.uniform(3)), np.random.default_rng(0))
        >>> state = env.reset()
        >>> outcome = env.step(np.zeros(4))
        >>> env.calls_made
        1
    """

    def __init__(self, cfg: EnvConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.state: Controller | None = None
        self._calls = 0

    @property
    def calls_made(self) -> int:
        return self._calls

    def reset(self) -> Controller:
        self.state = Controller.from_vector(random_controller_vector(self.cfg.n_spins, self.rng))
        return self.state

    def set_state(self, ctrl: Controller) -> None:
        self.state = ctrl

    def evaluate(self, ctrl: Controller) -> float:
        """Perceived fidelity of ``ctrl``; costs one environment call."""
        cfg = self.cfg
        H = build_hamiltonian(cfg.spec, ctrl)
        if cfg.noise.sigma_noise > 0:
            H = H + sample_structured_perturbation(cfg.n_spins, cfg.noise.sigma_noise, self.rng)
        f = hamiltonian_fidelity(H, ctrl.read_time, cfg.spec.source, cfg.spec.target)
        self._calls += 1
        return coarse_grain_fidelity(f, cfg.noise.shots, self.rng)

    def evaluate_with_gradient(self, ctrl: Controller) -> tuple[float, np.ndarray]:
        """Perceived fidelity plus the analytic ``(dF/dDelta, dF/dT)`` of the
        (possibly perturbed) instance; one environment call."""
        cfg = self.cfg
        H = build_hamiltonian(cfg.spec, ctrl)
        if cfg.noise.sigma_noise > 0:
            H = H + sample_structured_perturbation(cfg.n_spins, cfg.noise.sigma_noise, self.rng)
        f, g_diag, _, g_t = hamiltonian_fidelity_and_gradient(
            H, ctrl.read_time, cfg.spec.source, cfg.spec.target
        )
        self._calls += 1
        return coarse_grain_fidelity(f, cfg.noise.shots, self.rng), np.append(g_diag, g_t)

    def step(self, action) -> StepOutcome:
        if self.state is None:
            raise ContractError("step() called before reset()")
        action = np.asarray(action, dtype=float)
        if action.shape != (self.cfg.n_spins + 1,) or not np.all(np.isfinite(action)):
            raise ContractError(f"bad action {action!r}")
        bounds = self.cfg.step_bounds
        increment = np.clip(self.cfg.action_scales * action, -bounds, bounds)
        nxt = Controller.from_vector(wrap_controller(self.state.as_vector() + increment))
        reward = self.evaluate(nxt)
        self.state = nxt
        return StepOutcome(nxt, reward, reward >= self.cfg.reward_threshold)

    def true_fidelity(self, ctrl: Controller | None = None) -> float:
        """Noiseless fidelity; not metered."""
        ctrl = self.state if ctrl is None else ctrl
        H = build_hamiltonian(self.cfg.spec, ctrl)
        return hamiltonian_fidelity(H, ctrl.read_time, self.cfg.spec.source, self.cfg.spec.target)
