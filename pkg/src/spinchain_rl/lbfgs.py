"""L-BFGS with random restarts for model-based fidelity maximization.

The generic minimizer (:func:`lbfgs_minimize`) works on any smooth
objective returning ``(f, grad)``. :func:`optimize_with_restarts` wraps it
around ``1 - F`` for the spin-chain problem, with every objective+gradient
evaluation metered as one environment call.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import DELTA_LIMIT, TIME_LIMIT, ContractError, Controller, fidelity_and_gradient
from .env import TIME_EPS, EnvConfig, SpinChainEnv

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]

CURVATURE_EPS = 1e-10
MAX_HALVINGS = 20


class LineSearchError(RuntimeError):
    pass


class StopOptimization(Exception):
    """Raised by an objective to end the current run early (e.g. threshold hit)."""


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    gtol: float = 1e-8
    max_iter: int = 500
    max_restarts: int = 100
    threshold: float = 0.99
    noisy_mode: bool = False
    max_env_calls: int | None = None

    def __post_init__(self):
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise ContractError(f"need 0 < c1 < c2 < 1, got c1={self.c1}, c2={self.c2}")
        if self.memory < 1:
            raise ContractError("memory must be >= 1")


def two_loop_direction(history, grad: np.ndarray) -> np.ndarray:
    """Approximate ``-H_k grad`` from stored ``(s, y)`` pairs (oldest first).

    Pairs failing the curvature condition ``s.y > 1e-10`` are skipped.
    """
    pairs = [(s, y, float(s @ y)) for s, y in history]
    pairs = [(s, y, sy) for s, y, sy in pairs if sy > CURVATURE_EPS]
    q = np.array(grad, dtype=float)
    if not pairs:
        return -q
    alphas = []
    for s, y, sy in reversed(pairs):
        a = (s @ q) / sy
        q -= a * y
        alphas.append(a)
    s, y, sy = pairs[-1]
    r = q * (sy / (y @ y))
    for (s, y, sy), a in zip(pairs, reversed(alphas)):
        b = (y @ r) / sy
        r += s * (a - b)
    return -r


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating two points with slopes, or None."""
    if a == b:
        return None
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    x = b - (b - a) * (gb + d2 - d1) / denom
    return x if math.isfinite(x) else None


def line_search(objective: Objective, x: np.ndarray, f0: float, g0: np.ndarray,
                direction: np.ndarray, cfg: LbfgsConfig, alpha0: float = 1.0,
                max_trials: int = 25):
    """Strong-Wolfe line search (bracketing then zoom).

    Returns ``(alpha, f, g)`` at the accepted point. In noisy mode a failed
    search falls back to step halving and finally returns the smallest trial
    step. Raises :class:`LineSearchError` otherwise.
    """
    d0 = float(g0 @ direction)
    if d0 >= 0:
        raise LineSearchError("not a descent direction")
    c1, c2 = cfg.c1, cfg.c2

    def phi(a):
        f, g = objective(x + a * direction)
        if not math.isfinite(f) or not np.all(np.isfinite(g)):
            raise LineSearchError(f"non-finite objective at step {a}")
        return f, g, float(g @ direction)

    def zoom(lo, f_lo, d_lo, g_lo, hi, f_hi, d_hi, trials):
        for _ in range(trials):
            a = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            lo_b, hi_b = min(lo, hi), max(lo, hi)
            width = hi_b - lo_b
            if width <= 1e-14 * max(1.0, hi_b):
                return None
            if a is None or not (lo_b + 0.1 * width <= a <= hi_b - 0.1 * width):
                a = 0.5 * (lo + hi)
            f, g, d = phi(a)
            if f > f0 + c1 * a * d0 or f >= f_lo:
                hi, f_hi, d_hi = a, f, d
            else:
                if abs(d) <= -c2 * d0:
                    return a, f, g
                if d * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo, g_lo = a, f, d, g
        return None

    trials_left = max_trials
    a_prev, f_prev, d_prev, g_prev = 0.0, f0, d0, g0
    a = alpha0
    found = None
    for i in range(max_trials):
        f, g, d = phi(a)
        trials_left -= 1
        if f > f0 + c1 * a * d0 or (i > 0 and f >= f_prev):
            found = zoom(a_prev, f_prev, d_prev, g_prev, a, f, d, trials_left)
            break
        if abs(d) <= -c2 * d0:
            found = (a, f, g)
            break
        if d >= 0:
            found = zoom(a, f, d, g, a_prev, f_prev, d_prev, trials_left)
            break
        a_prev, f_prev, d_prev, g_prev = a, f, d, g
        a = 2.0 * a
    if found is not None:
        return found
    if not cfg.noisy_mode:
        raise LineSearchError("strong Wolfe conditions not met")
    a = alpha0
    for _ in range(MAX_HALVINGS):
        a *= 0.5
        f, g, _ = phi(a)
        if f <= f0 + c1 * a * d0:
            return a, f, g
    return a, f, g


@dataclass
class MinimizeResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    status: str  # "gtol", "maxiter", "linesearch", "stopped"


def lbfgs_minimize(objective: Objective, x0, cfg: LbfgsConfig,
                   lower=None, upper=None) -> MinimizeResult:
    """Minimize ``objective`` from ``x0`` with projection onto box bounds.

    The objective is evaluated at the projected point and gradient entries
    pinned at an active bound (pointing outward) are zeroed.
    """
    lower = None if lower is None else np.asarray(lower, dtype=float)
    upper = None if upper is None else np.asarray(upper, dtype=float)
    bounded = lower is not None or upper is not None

    def project(x):
        return np.clip(x, lower, upper) if bounded else x

    def projected_objective(x):
        xp = project(x)
        f, g = objective(xp)
        g = np.array(g, dtype=float)
        if bounded:
            lo = lower if lower is not None else -np.inf
            hi = upper if upper is not None else np.inf
            g[((xp <= lo) & (g > 0)) | ((xp >= hi) & (g < 0))] = 0.0
        return f, g

    x = project(np.array(x0, dtype=float))
    history: deque = deque(maxlen=cfg.memory)
    try:
        f, g = projected_objective(x)
    except StopOptimization:
        return MinimizeResult(x, float("nan"), np.zeros_like(x), 0, "stopped")
    it = 0
    status = "maxiter"
    while it < cfg.max_iter:
        if np.linalg.norm(g) <= cfg.gtol:
            status = "gtol"
            break
        d = two_loop_direction(history, g)
        if g @ d >= 0:
            history.clear()
            d = -g
        alpha0 = 1.0 if history else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-12))
        try:
            a, f_new, g_new = line_search(projected_objective, x, f, g, d, cfg, alpha0)
        except LineSearchError:
            status = "linesearch"
            break
        except StopOptimization:
            status = "stopped"
            break
        x_new = project(x + a * d)
        history.append((x_new - x, g_new - g))
        x, f, g = x_new, f_new, g_new
        it += 1
    return MinimizeResult(x, float(f), g, it, status)


# ---------------------------------------------------------------------------
# spin-chain driver


@dataclass
class OptimResult:
    best_controller: Controller
    best_true_fidelity: float
    best_perceived: float
    env_calls: int
    restarts: int
    converged: bool


def controller_bounds(n_spins: int) -> tuple[np.ndarray, np.ndarray]:
    lower = np.append(np.full(n_spins, -DELTA_LIMIT), TIME_EPS)
    upper = np.append(np.full(n_spins, DELTA_LIMIT), TIME_LIMIT)
    return lower, upper


class _Budget(Exception):
    pass


def optimize_with_restarts(env_cfg: EnvConfig, cfg: LbfgsConfig,
                           rng: np.random.Generator) -> OptimResult:
    """Restarted L-BFGS ascent on the fidelity until ``cfg.threshold``.

    Noiseless mode terminates on the true fidelity; noisy mode (Hamiltonian
    perturbation drawn afresh at every evaluation) terminates on the perceived
    one. Every objective evaluation, line-search trials included, costs one
    environment call.
    """
    env = SpinChainEnv(env_cfg, rng)
    n = env_cfg.n_spins
    lower, upper = controller_bounds(n)
    best = {"ctrl": None, "perceived": -1.0, "hit": False}

    def objective(x):
        if cfg.max_env_calls is not None and env.calls_made >= cfg.max_env_calls:
            raise _Budget
        ctrl = Controller.from_vector(x)
        perceived, grad = env.evaluate_with_gradient(ctrl)
        if perceived > best["perceived"]:
            best["ctrl"], best["perceived"] = ctrl, perceived
        if perceived >= cfg.threshold:
            best["ctrl"], best["perceived"], best["hit"] = ctrl, perceived, True
            raise StopOptimization
        return 1.0 - perceived, -grad

    restarts = 0
    try:
        while restarts < cfg.max_restarts and not best["hit"]:
            restarts += 1
            x0 = env.reset().as_vector()
            lbfgs_minimize(objective, x0, cfg, lower, upper)
    except _Budget:
        pass
    ctrl = best["ctrl"] if best["ctrl"] is not None else env.state
    return OptimResult(
        best_controller=ctrl,
        best_true_fidelity=env.true_fidelity(ctrl),
        best_perceived=float(best["perceived"]),
        env_calls=env.calls_made,
        restarts=restarts,
        converged=best["hit"],
    )


def polish(env_cfg: EnvConfig, ctrl: Controller, cfg: LbfgsConfig | None = None) -> Controller:
    """Run noiseless L-BFGS from ``ctrl`` to a stationary point (no threshold stop)."""
    cfg = cfg or LbfgsConfig()
    spec = env_cfg.spec
    lower, upper = controller_bounds(spec.n_spins)
    def objective(x):
        F, g = fidelity_and_gradient(spec, Controller.from_vector(x))
        return 1.0 - F, -g

    res = lbfgs_minimize(objective, ctrl.as_vector(), cfg, lower, upper)
    return Controller.from_vector(res.x)
