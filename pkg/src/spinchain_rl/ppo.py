"""Proximal policy optimization written directly against numpy.

Policy and value functions are small tanh MLPs with hand-written
backpropagation and Adam. The policy is a diagonal Gaussian whose mean comes
from the network and whose log standard deviation is a free parameter
vector. Advantages use GAE(lambda); the policy step ascends the clipped
likelihood-ratio surrogate.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import DELTA_LIMIT, TIME_LIMIT, ContractError, Controller
from .env import EnvConfig, SpinChainEnv

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "spinchain-rl-ppo-checkpoint"
CHECKPOINT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# networks


class MLP:
    """Dense tanh network; the last layer is linear.

    Weights and biases are views into one flat buffer (``self.flat``) so the
    optimizer can update everything in a single vectorized step.
    """

    def __init__(self, sizes: list[int], rng: np.random.Generator, out_gain: float = 1.0):
        self.sizes = list(sizes)
        shapes = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            shapes += [(n_in, n_out), (n_out,)]
        self.flat = np.zeros(sum(int(np.prod(sh)) for sh in shapes))
        self.params: list[np.ndarray] = []
        offset = 0
        for sh in shapes:
            size = int(np.prod(sh))
            self.params.append(self.flat[offset:offset + size].reshape(sh))
            offset += size
        for i in range(self.n_layers):
            gain = out_gain if i == self.n_layers - 1 else math.sqrt(2.0)
            self.params[2 * i][...] = _orthogonal(sizes[i], sizes[i + 1], gain, rng)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def set_flat(self, values) -> None:
        self.flat[...] = values

    def forward(self, x: np.ndarray):
        """Return output and the activations cache needed by :meth:`backward`."""
        acts = [x]
        h = x
        last = self.n_layers - 1
        for i in range(self.n_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            h = np.tanh(z) if i < last else z
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray) -> np.ndarray:
        """Gradient with respect to :attr:`flat`."""
        grads = [None] * len(self.params)
        g = grad_out
        for i in reversed(range(self.n_layers)):
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.params[2 * i].T) * (1.0 - acts[i] ** 2)
        return np.concatenate([gr.ravel() for gr in grads])


def _orthogonal(n_in: int, n_out: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


class Adam:
    """Adam on a single flat parameter vector (updated in place)."""

    def __init__(self, params: np.ndarray, lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros_like(params)
        self.v = np.zeros_like(params)
        self.t = 0

    def step(self, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.b1
        self.m += (1.0 - self.b1) * grad
        self.v *= self.b2
        self.v += (1.0 - self.b2) * grad * grad
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        self.params -= self.lr * (self.m / c1) / (np.sqrt(self.v / c2) + self.eps)


class MlpParams:
    """Policy network, state-independent log-std and value network.

    The policy weights and the log-std share one flat buffer,
    :attr:`policy_flat`, which is what the policy optimizer updates.
    """

    def __init__(self, policy: MLP, log_std, value: MLP):
        n_pi = policy.flat.size
        act_dim = policy.sizes[-1]
        self.policy_flat = np.empty(n_pi + act_dim)
        self.policy_flat[:n_pi] = policy.flat
        self.policy_flat[n_pi:] = log_std
        # rebind the network onto the shared buffer
        offset = 0
        policy.flat = self.policy_flat[:n_pi]
        for j, p in enumerate(policy.params):
            policy.params[j] = policy.flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        self.policy = policy
        self.log_std = self.policy_flat[n_pi:]
        self.value = value

    @classmethod
    def init(cls, obs_dim: int, act_dim: int, hidden: tuple[int, ...], rng: np.random.Generator,
             init_log_std: float = 0.0) -> "MlpParams":
        policy = MLP([obs_dim, *hidden, act_dim], rng, out_gain=0.01)
        value = MLP([obs_dim, *hidden, 1], rng, out_gain=1.0)
        return cls(policy, np.full(act_dim, float(init_log_std)), value)

    def flat(self) -> dict[str, list]:
        return {
            "policy_sizes": self.policy.sizes,
            "value_sizes": self.value.sizes,
            "policy": self.policy.flat.tolist(),
            "log_std": self.log_std.tolist(),
            "value": self.value.flat.tolist(),
        }


# ---------------------------------------------------------------------------
# policy distribution


def gaussian_log_prob(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI


def policy_sample(params: MlpParams, state: np.ndarray, rng: np.random.Generator):
    """Draw an action from the Gaussian policy at ``state``.

    Returns ``(action, log_prob)``; ``log_prob`` is the density of exactly the
    returned action.
    """
    mean = params.policy(np.asarray(state, dtype=float)[None, :])[0]
    log_std = params.log_std
    noise = rng.standard_normal(mean.shape)
    action = mean + np.exp(log_std) * noise
    # z-score of the action is exactly the drawn noise
    log_prob = -0.5 * float(noise @ noise) - float(log_std.sum()) - 0.5 * mean.size * LOG_2PI
    return action, log_prob


def normalize_state(ctrl: Controller) -> np.ndarray:
    """Scale biases by 10 and readout time by 30 before feeding the networks."""
    return np.append(np.asarray(ctrl.delta) / DELTA_LIMIT, ctrl.read_time / TIME_LIMIT)


# ---------------------------------------------------------------------------
# trajectories and advantages


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    last_value: float = 0.0
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None
    raw_advantages: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)


def discounted_cumsum(x: np.ndarray, discount: float) -> np.ndarray:
    out = np.empty(len(x))
    acc = 0.0
    for i in range(len(x) - 1, -1, -1):
        acc = x[i] + discount * acc
        out[i] = acc
    return out


def compute_advantages(traj: Trajectory, gamma: float, lam: float, normalize: bool = True) -> Trajectory:
    """Fill in bootstrapped returns-to-go and GAE advantages.

    ``raw_advantages`` keeps the un-normalized estimates; ``advantages`` is
    standardized over the batch when ``normalize`` is set.
    """
    rewards = np.asarray(traj.rewards, dtype=float)
    values = np.append(np.asarray(traj.values, dtype=float), traj.last_value)
    deltas = rewards + gamma * values[1:] - values[:-1]
    raw = discounted_cumsum(deltas, gamma * lam)
    traj.returns = discounted_cumsum(np.append(rewards, traj.last_value), gamma)[:-1]
    traj.raw_advantages = raw
    if normalize and len(raw) > 1:
        traj.advantages = (raw - raw.mean()) / (raw.std() + 1e-8)
    else:
        traj.advantages = raw.copy()
    if not np.all(np.isfinite(traj.advantages)):
        raise DivergenceError("non-finite advantages")
    return traj


# ---------------------------------------------------------------------------
# losses


def surrogate_loss_and_grads(params: MlpParams, states, actions, old_log_probs, advantages,
                             clip_ratio: float):
    """Negative clipped surrogate, its gradients and diagnostics.

    The gradient is flat, aligned with :attr:`MlpParams.policy_flat`.
    """
    mean, acts = params.policy.forward(states)
    log_std = params.log_std
    logp = gaussian_log_prob(actions, mean, log_std)
    ratio = np.exp(logp - old_log_probs)
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio)
    surr = np.minimum(ratio * advantages, clipped * advantages)
    n = len(advantages)
    loss = -surr.mean()
    # the unclipped branch carries gradient unless the ratio left the trust band
    active = np.where(advantages >= 0, ratio <= 1.0 + clip_ratio, ratio >= 1.0 - clip_ratio)
    dlogp = -(active * ratio * advantages) / n
    inv_var = np.exp(-2.0 * log_std)
    diff = actions - mean
    d_mean = dlogp[:, None] * diff * inv_var
    d_log_std = np.sum(dlogp[:, None] * (diff * diff * inv_var - 1.0), axis=0)
    grads = np.concatenate([params.policy.backward(acts, d_mean), d_log_std])
    info = {
        "ratio": ratio,
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip_ratio)),
        "approx_kl": float(np.mean(old_log_probs - logp)),
    }
    return float(loss), grads, info


def value_loss_and_grads(params: MlpParams, states, returns):
    v, acts = params.value.forward(states)
    err = v[:, 0] - returns
    loss = float(np.mean(err * err))
    grads = params.value.backward(acts, (2.0 * err / len(err))[:, None])
    return loss, grads


# ---------------------------------------------------------------------------
# training


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    update_epochs: int = 10
    minibatch_size: int = 64
    epochs_max: int = 10_000
    steps_per_epoch: int | None = None  # None: take it from the environment config
    target_threshold: float | None = None  # None: take it from the environment config
    hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = 0.0
    max_env_calls: int | None = None

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ContractError(f"gamma {self.gamma} outside (0, 1]")
        if not 0.0 < self.clip_ratio < 1.0:
            raise ContractError(f"clip_ratio {self.clip_ratio} outside (0, 1)")
        self.hidden = tuple(self.hidden)


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss_first: float
    value_loss_last: float
    clip_frac: float
    approx_kl: float
    first_pass_ratio_dev: float


def ppo_update(params: MlpParams, traj: Trajectory, cfg: PpoConfig, rng: np.random.Generator,
               pi_opt: Adam | None = None, v_opt: Adam | None = None) -> UpdateStats:
    """Run ``cfg.update_epochs`` minibatch passes over ``traj`` in place."""
    if traj.advantages is None:
        raise ContractError("compute_advantages() must run before ppo_update()")
    pi_opt = pi_opt or Adam(params.policy_flat, cfg.policy_lr)
    v_opt = v_opt or Adam(params.value.flat, cfg.value_lr)
    n = len(traj)
    mb = min(cfg.minibatch_size, n)
    first_dev = []
    v_first = v_last = float("nan")
    pi_loss = clip_frac = kl = 0.0
    for epoch in range(cfg.update_epochs):
        order = rng.permutation(n)
        v_losses = []
        for start in range(0, n, mb):
            idx = order[start:start + mb]
            pi_loss, pi_grads, info = surrogate_loss_and_grads(
                params, traj.states[idx], traj.actions[idx], traj.log_probs[idx],
                traj.advantages[idx], cfg.clip_ratio,
            )
            v_loss, v_grads = value_loss_and_grads(params, traj.states[idx], traj.returns[idx])
            if not (math.isfinite(pi_loss) and math.isfinite(v_loss)):
                raise DivergenceError(f"non-finite loss (policy={pi_loss}, value={v_loss})")
            if epoch == 0 and start == 0:
                # policy is still the one that collected the batch
                first_dev.append(np.abs(info["ratio"] - 1.0))
            pi_opt.step(pi_grads)
            v_opt.step(v_grads)
            v_losses.append(v_loss)
            clip_frac, kl = info["clip_frac"], info["approx_kl"]
        if epoch == 0:
            v_first = float(np.mean(v_losses))
        v_last = float(np.mean(v_losses))
    return UpdateStats(pi_loss, v_first, v_last, clip_frac, kl,
                       float(np.median(np.concatenate(first_dev))))


@dataclass
class TrainResult:
    best_controller: Controller
    best_perceived: float
    env_calls: int
    converged: bool
    epochs: int
    perceived_series: list[float] = field(default_factory=list)
    true_series: list[float] = field(default_factory=list)
    true_fidelity: float = float("nan")


def train(env_cfg: EnvConfig, ppo_cfg: PpoConfig, rng: np.random.Generator,
          env: SpinChainEnv | None = None) -> TrainResult:
    """Train PPO until a perceived reward reaches the threshold.

    ``env`` may be any object with ``reset``/``step``/``calls_made``/
    ``true_fidelity``; by default a :class:`SpinChainEnv` is built from
    ``env_cfg``. Exhausting ``epochs_max`` or ``max_env_calls`` is a recorded
    outcome (``converged=False``), not an error.
    """
    env_rng, policy_rng, update_rng, init_rng = rng.spawn(4)
    env = env or SpinChainEnv(env_cfg, env_rng)
    threshold = ppo_cfg.target_threshold if ppo_cfg.target_threshold is not None \
        else env_cfg.reward_threshold
    steps = ppo_cfg.steps_per_epoch or env_cfg.steps_per_epoch
    obs_dim = act_dim = env_cfg.n_spins + 1
    params = MlpParams.init(obs_dim, act_dim, ppo_cfg.hidden, init_rng, ppo_cfg.init_log_std)
    pi_opt = Adam(params.policy_flat, ppo_cfg.policy_lr)
    v_opt = Adam(params.value.flat, ppo_cfg.value_lr)
    budget = ppo_cfg.max_env_calls

    best_ctrl, best_r = None, -1.0
    perceived_series, true_series = [], []
    converged = False
    epoch = 0
    while epoch < ppo_cfg.epochs_max and not converged:
        epoch += 1
        state = env.reset()
        obs = normalize_state(state)
        S = np.empty((steps, obs_dim))
        A = np.empty((steps, act_dim))
        LP = np.empty(steps)
        R = np.empty(steps)
        n = 0
        epoch_best_ctrl, epoch_best = state, -1.0
        for t in range(steps):
            if budget is not None and env.calls_made >= budget:
                break
            action, logp = policy_sample(params, obs, policy_rng)
            out = env.step(action)
            S[t], A[t], LP[t], R[t] = obs, action, logp, out.reward
            n = t + 1
            obs = normalize_state(out.next_state)
            if out.reward > epoch_best:
                epoch_best_ctrl, epoch_best = out.next_state, out.reward
            if out.reward >= threshold:
                converged = True
                break
        if n == 0:
            break
        if epoch_best > best_r:
            best_ctrl, best_r = epoch_best_ctrl, epoch_best
        perceived_series.append(epoch_best)
        true_series.append(env.true_fidelity(epoch_best_ctrl))
        if converged or (budget is not None and env.calls_made >= budget):
            break
        S, A, LP, R = S[:n], A[:n], LP[:n], R[:n]
        values = params.value(S)[:, 0]
        last_value = float(params.value(obs[None, :])[0, 0])
        traj = compute_advantages(Trajectory(S, A, LP, R, values, last_value),
                                  ppo_cfg.gamma, ppo_cfg.gae_lambda)
        stats = ppo_update(params, traj, ppo_cfg, update_rng, pi_opt, v_opt)
        if epoch % 100 == 0:
            log.debug("epoch %d calls %d best %.4f kl %.4f", epoch, env.calls_made, best_r,
                      stats.approx_kl)

    if best_ctrl is None:
        best_ctrl = env.state
    return TrainResult(
        best_controller=best_ctrl,
        best_perceived=float(best_r),
        env_calls=env.calls_made,
        converged=converged,
        epochs=epoch,
        perceived_series=perceived_series,
        true_series=true_series,
        true_fidelity=env.true_fidelity(best_ctrl),
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: MlpParams, cfg: PpoConfig, rng: np.random.Generator) -> Path:
    """Write a versioned JSON checkpoint of all network parameters."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "params": params.flat(),
        "rng_state": rng.bit_generator.state,
    }
    try:
        path.write_text(json.dumps(payload))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> tuple[MlpParams, PpoConfig, np.random.Generator]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path} is not a PPO checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {payload.get('version')}")
    p = payload["params"]
    dummy = np.random.default_rng(0)
    policy = MLP(p["policy_sizes"], dummy)
    policy.set_flat(p["policy"])
    value = MLP(p["value_sizes"], dummy)
    value.set_flat(p["value"])
    params = MlpParams(policy, np.asarray(p["log_std"], dtype=float), value)
    cfg = PpoConfig(**payload["config"])
    state = payload["rng_state"]
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return params, cfg, np.random.Generator(bitgen)
