"""Experiment orchestration: cost sweeps, noise sweeps and robustness studies.

Every run gets its own seed from :func:`derive_seed`, so a master seed fixes
every number written to disk. Wall-clock times are kept out of the CSV data
and only go to the metadata sidecar.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .dynamics import DELTA_LIMIT, TIME_LIMIT, ChainSpec, ContractError, Controller, fidelity
from .env import EnvConfig
from .lbfgs import LbfgsConfig, optimize_with_restarts, polish
from .noise import NoiseConfig
from .ppo import PpoConfig, train
from . import robustness

log = logging.getLogger(__name__)

SCHEMA = "spinchain-rl-runs"
SCHEMA_VERSION = 1
MASK64 = (1 << 64) - 1
ALGORITHMS = ("lbfgs", "ppo", "random")
KINDS = ("cost-sweep", "noise-sweep", "mcra", "sphere", "random-baseline")

RUN_COLUMNS = [
    "algorithm", "n_spins", "source", "target", "sigma", "shots", "threshold", "run",
    "seed", "env_calls", "converged", "perceived_fidelity", "true_fidelity", "read_time",
    "delta",
]


# ---------------------------------------------------------------------------
# seeding


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *indices: int) -> int:
    """64-bit seed for a grid cell and run index.

    Folds each index into the state with one SplitMix64 round:
    ``h <- splitmix64(h ^ index)``, starting from ``splitmix64(master)``.
    Each round is a bijection of the 64-bit state, so seeds differing only
    in the final index never collide.
    """
    h = splitmix64(int(master) & MASK64)
    for idx in indices:
        h = splitmix64(h ^ (int(idx) & MASK64))
    return h


# ---------------------------------------------------------------------------
# records


@dataclass
class RunRecord:
    algorithm: str
    seed: int
    n_spins: int
    source: int
    target: int
    sigma: float
    shots: int
    threshold: float
    env_calls: int
    converged: bool
    perceived_fidelity: float
    true_fidelity: float
    delta: list[float]
    read_time: float
    run: int = 0
    wall_time: float = 0.0

    @property
    def controller(self) -> Controller:
        return Controller(tuple(self.delta), self.read_time)

    @property
    def cell(self) -> tuple:
        return (self.algorithm, self.n_spins, self.source, self.target, self.sigma,
                self.shots, self.threshold)


def _record(algorithm, env_cfg: EnvConfig, seed, run, calls, converged, perceived,
            ctrl: Controller, wall) -> RunRecord:
    spec = env_cfg.spec
    return RunRecord(
        algorithm=algorithm, seed=int(seed), n_spins=spec.n_spins, source=spec.source,
        target=spec.target, sigma=env_cfg.noise.sigma_noise, shots=env_cfg.noise.shots,
        threshold=env_cfg.reward_threshold, env_calls=int(calls), converged=bool(converged),
        perceived_fidelity=float(perceived), true_fidelity=fidelity(spec, ctrl),
        delta=list(ctrl.delta), read_time=ctrl.read_time, run=run, wall_time=wall,
    )


# ---------------------------------------------------------------------------
# algorithms


def _batch_fidelity(X: np.ndarray, spec: ChainSpec, sigma: float,
                    rng: np.random.Generator) -> np.ndarray:
    B, n = X.shape[0], spec.n_spins
    H = np.zeros((B, n, n))
    i = np.arange(n)
    H[:, i, i] = X[:, :n]
    J = np.asarray(spec.couplings)
    H[:, i[:-1], i[1:]] = J
    H[:, i[1:], i[:-1]] = J
    if sigma > 0:
        P = rng.standard_normal((B, 2 * n - 1)) * sigma
        H[:, i, i] += P[:, :n]
        H[:, i[:-1], i[1:]] += P[:, n:]
        H[:, i[1:], i[:-1]] += P[:, n:]
    lam, V = np.linalg.eigh(H)
    a = np.sum(V[:, spec.target, :] * np.exp(-1j * lam * X[:, n:]) * V[:, spec.source, :],
               axis=1)
    return np.minimum(1.0, a.real**2 + a.imag**2)


def random_search(env_cfg: EnvConfig, budget: int, rng: np.random.Generator,
                  batch: int = 4096, seed: int = 0, run: int = 0) -> RunRecord:
    """Guess controllers uniformly until the perceived reward hits the threshold.

    Candidates are drawn and evaluated in batches for speed, but the call
    count stops at the first success exactly as a sequential search would.
    """
    if budget < 1:
        raise ContractError("budget must be >= 1")
    t0 = time.perf_counter()
    n = env_cfg.n_spins
    spec, noise = env_cfg.spec, env_cfg.noise
    calls = 0
    best_x, best_r = None, -1.0
    hit = False
    while calls < budget and not hit:
        b = min(batch, budget - calls)
        X = np.column_stack([rng.uniform(-DELTA_LIMIT, DELTA_LIMIT, (b, n)),
                             TIME_LIMIT - rng.uniform(0.0, TIME_LIMIT, b)])
        f = _batch_fidelity(X, spec, noise.sigma_noise, rng)
        if noise.shots > 0:
            f = rng.binomial(noise.shots, f) / noise.shots
        success = np.flatnonzero(f >= env_cfg.reward_threshold)
        if success.size:
            hit = True
            j = int(success[0])
            calls += j + 1
        else:
            j = int(np.argmax(f))
            calls += b
        if f[j] > best_r:
            best_x, best_r = X[j], float(f[j])
    return _record("random", env_cfg, seed, run, calls, hit, best_r,
                   Controller.from_vector(best_x), time.perf_counter() - t0)


def run_lbfgs(env_cfg: EnvConfig, budget: int, rng: np.random.Generator, seed: int = 0,
              run: int = 0, **overrides) -> RunRecord:
    t0 = time.perf_counter()
    noisy = not env_cfg.noise.noiseless
    cfg = LbfgsConfig(threshold=env_cfg.reward_threshold, noisy_mode=noisy,
                      max_env_calls=budget, max_restarts=overrides.pop("max_restarts", 10**9),
                      **overrides)
    res = optimize_with_restarts(env_cfg, cfg, rng)
    return _record("lbfgs", env_cfg, seed, run, res.env_calls, res.converged,
                   res.best_perceived, res.best_controller, time.perf_counter() - t0)


def run_ppo(env_cfg: EnvConfig, budget: int, rng: np.random.Generator, seed: int = 0,
            run: int = 0, **overrides) -> RunRecord:
    t0 = time.perf_counter()
    cfg = PpoConfig(max_env_calls=budget, epochs_max=overrides.pop("epochs_max", 10**9),
                    **overrides)
    res = train(env_cfg, cfg, rng)
    return _record("ppo", env_cfg, seed, run, res.env_calls, res.converged,
                   res.best_perceived, res.best_controller, time.perf_counter() - t0)


RUNNERS = {"lbfgs": run_lbfgs, "ppo": run_ppo, "random": random_search}


# ---------------------------------------------------------------------------
# configuration


def parse_transition(text: str) -> tuple[int, int]:
    """``"0:2"`` or ``"0->2"`` to ``(0, 2)``."""
    for sep in ("->", ":", "→"):
        if sep in str(text):
            a, b = str(text).split(sep)
            return int(a), int(b)
    raise ContractError(f"cannot parse transition {text!r}; expected 'S:T'")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    Config files (JSON or YAML) use the same field names; ``transitions`` are
    written as ``"S:T"`` strings with 0-based sites.
    """

    kind: str = "cost-sweep"
    algorithms: tuple[str, ...] = ALGORITHMS
    chain_lengths: tuple[int, ...] = (3, 4, 5, 6, 7)
    transitions: tuple[tuple[int, int], ...] = ((0, 2),)
    sigmas: tuple[float, ...] = (0.0,)
    shots: int = 0
    runs: int = 50
    threshold: float = 0.99
    budget: int = 1_000_000
    master_seed: int = 0
    repeats: int = 10
    n_directions: int = 1000
    workers: int = 1
    ppo: dict = field(default_factory=dict)
    lbfgs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown experiment kind {self.kind!r}")
        self.algorithms = tuple(self.algorithms)
        bad = set(self.algorithms) - set(ALGORITHMS)
        if bad:
            raise ContractError(f"unknown algorithms {sorted(bad)}")
        self.chain_lengths = tuple(int(n) for n in self.chain_lengths)
        self.transitions = tuple(
            parse_transition(t) if isinstance(t, str) else (int(t[0]), int(t[1]))
            for t in self.transitions
        )
        self.sigmas = tuple(float(s) for s in self.sigmas)
        if self.runs < 1:
            raise ContractError("runs must be >= 1")
        if not 0.0 < self.threshold <= 1.0:
            raise ContractError(f"threshold {self.threshold} outside (0, 1]")
        if self.budget < 1:
            raise ContractError("budget must be >= 1")

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        import yaml

        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc}") from exc
        return cls.from_mapping(data)

    def to_mapping(self) -> dict[str, Any]:
        d = asdict(self)
        d["transitions"] = [f"{s}:{t}" for s, t in self.transitions]
        d["algorithms"] = list(self.algorithms)
        d["chain_lengths"] = list(self.chain_lengths)
        d["sigmas"] = list(self.sigmas)
        return d


@dataclass(frozen=True)
class Task:
    algorithm: str
    n_spins: int
    source: int
    target: int
    sigma: float
    shots: int
    threshold: float
    budget: int
    seed: int
    run: int
    overrides: tuple = ()

    def env_config(self) -> EnvConfig:
        spec = ChainSpec.uniform(self.n_spins, self.source, self.target)
        return EnvConfig(spec, NoiseConfig(self.sigma, self.shots), reward_threshold=self.threshold)


def execute(task: Task) -> RunRecord:
    rng = np.random.default_rng(task.seed)
    runner = RUNNERS[task.algorithm]
    return runner(task.env_config(), task.budget, rng, seed=task.seed, run=task.run,
                  **dict(task.overrides))


def build_tasks(cfg: ExperimentConfig) -> list[Task]:
    tasks = []
    for a_i, alg in enumerate(cfg.algorithms):
        overrides = tuple(sorted(getattr(cfg, alg, {}).items())) if alg != "random" else ()
        for n_i, n in enumerate(cfg.chain_lengths):
            for t_i, (src, tgt) in enumerate(cfg.transitions):
                if not (0 <= src < n and 0 <= tgt < n):
                    raise ContractError(f"transition {src}:{tgt} invalid for N={n}")
                for s_i, sigma in enumerate(cfg.sigmas):
                    for r in range(cfg.runs):
                        seed = derive_seed(cfg.master_seed, a_i, n_i, t_i, s_i, r)
                        tasks.append(Task(alg, n, src, tgt, sigma, cfg.shots, cfg.threshold,
                                          cfg.budget, seed, r, overrides))
    return tasks


def run_tasks(tasks: Sequence[Task], workers: int = 1) -> list[RunRecord]:
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(execute, tasks))
    else:
        records = []
        for task in tasks:
            rec = execute(task)
            log.info("%s N=%d %d:%d sigma=%g run %d: calls=%d converged=%s",
                     task.algorithm, task.n_spins, task.source, task.target, task.sigma,
                     task.run, rec.env_calls, rec.converged)
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# summaries


def summarize(records: Iterable[RunRecord]) -> list[dict[str, Any]]:
    """Per-cell medians and interquartile ranges of the call counts."""
    cells: dict[tuple, list[RunRecord]] = {}
    for rec in records:
        cells.setdefault(rec.cell, []).append(rec)
    rows = []
    for cell, recs in cells.items():
        calls = np.array([r.env_calls for r in recs], dtype=float)
        perceived = np.array([r.perceived_fidelity for r in recs])
        true = np.array([r.true_fidelity for r in recs])
        q1, med, q3 = np.percentile(calls, [25, 50, 75])
        alg, n, src, tgt, sigma, shots, thr = cell
        rows.append({
            "algorithm": alg, "n_spins": n, "source": src, "target": tgt, "sigma": sigma,
            "shots": shots, "threshold": thr, "runs": len(recs),
            "converged": int(sum(r.converged for r in recs)),
            "median_calls": float(med), "q1_calls": float(q1), "q3_calls": float(q3),
            "median_perceived": float(np.median(perceived)),
            "median_true": float(np.median(true)),
            "min_true": float(true.min()),
        })
    return rows


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[RunRecord]
    summary: list[dict[str, Any]]
    extras: dict[str, Any] = field(default_factory=dict)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run every (algorithm, N, transition, sigma) cell ``cfg.runs`` times."""
    if cfg.kind == "random-baseline":
        cfg = replace(cfg, algorithms=("random",))
    if cfg.kind in ("mcra", "sphere"):
        return run_robustness(cfg)
    records = run_tasks(build_tasks(cfg), cfg.workers)
    return ExperimentResult(cfg, records, summarize(records))


def run_robustness(cfg: ExperimentConfig) -> ExperimentResult:
    """Collect converged controllers, then run the MCRA or a sphere scan.

    Controllers are found at the first value of ``cfg.sigmas`` (training
    noise). For ``sphere`` only L-BFGS controllers are scanned: each is
    polished to a stationary point, the one with the highest pooled median
    over the MCRA levels is selected and scanned.
    """
    algorithms = ("lbfgs",) if cfg.kind == "sphere" else cfg.algorithms
    base = replace(cfg, algorithms=algorithms, sigmas=cfg.sigmas[:1])
    records = run_tasks(build_tasks(base), cfg.workers)
    extras: dict[str, Any] = {}
    for n in cfg.chain_lengths:
        for src, tgt in cfg.transitions:
            spec = ChainSpec.uniform(n, src, tgt)
            env_cfg = EnvConfig(spec)
            for a_i, alg in enumerate(algorithms):
                ctrls = [r.controller for r in records
                         if r.algorithm == alg and r.converged and r.n_spins == n
                         and (r.source, r.target) == (src, tgt)]
                if not ctrls:
                    log.warning("no converged %s controllers for N=%d %d:%d", alg, n, src, tgt)
                    continue
                if cfg.kind == "sphere":
                    ctrls = [polish(env_cfg, c) for c in ctrls]
                key = (alg, n, src, tgt)
                rng = np.random.default_rng(derive_seed(cfg.master_seed, 1_000_003, a_i, n, src, tgt))
                dists = robustness.run_mcra(ctrls, spec, rng, repeats=cfg.repeats)
                extras[("mcra",) + key] = dists
                if cfg.kind == "sphere":
                    best = robustness.select_most_robust(ctrls, dists)
                    scan = robustness.sphere_scan(ctrls[best], spec, rng,
                                                  n_directions=cfg.n_directions)
                    extras[("sphere",) + key] = (ctrls[best], scan)
    return ExperimentResult(cfg, records, summarize(records), extras)


# ---------------------------------------------------------------------------
# persistence


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def export_records(records: Sequence[RunRecord], path, fmt: str = "csv") -> Path:
    """Write run records as schema-versioned CSV or JSON.

    CSV: a ``# spinchain-rl-runs v1`` line, then a header row with
    :data:`RUN_COLUMNS`, then one row per record; ``delta`` is ``;``-joined.
    Wall times are omitted from CSV. JSON mirrors the record fields.
    """
    path = Path(path)
    try:
        if fmt == "csv":
            with path.open("w", newline="") as fh:
                fh.write(f"# {SCHEMA} v{SCHEMA_VERSION}\n")
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(RUN_COLUMNS)
                for r in records:
                    row = asdict(r)
                    row["delta"] = ";".join(repr(float(d)) for d in r.delta)
                    w.writerow([_fmt(row[c]) for c in RUN_COLUMNS])
        elif fmt == "json":
            payload = {"format": SCHEMA, "version": SCHEMA_VERSION,
                       "records": [asdict(r) for r in records]}
            path.write_text(json.dumps(payload, indent=1))
        else:
            raise ContractError(f"unknown format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def load_records(path) -> list[RunRecord]:
    """Read records written by :func:`export_records` (CSV or JSON)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    if path.suffix == ".json":
        payload = json.loads(text)
        if payload.get("format") != SCHEMA:
            raise ContractError(f"{path} is not a runs file")
        return [RunRecord(**r) for r in payload["records"]]
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    out = []
    for row in csv.DictReader(lines):
        out.append(RunRecord(
            algorithm=row["algorithm"], seed=int(row["seed"]), n_spins=int(row["n_spins"]),
            source=int(row["source"]), target=int(row["target"]), sigma=float(row["sigma"]),
            shots=int(row["shots"]), threshold=float(row["threshold"]),
            env_calls=int(row["env_calls"]), converged=row["converged"] == "1",
            perceived_fidelity=float(row["perceived_fidelity"]),
            true_fidelity=float(row["true_fidelity"]),
            delta=[float(d) for d in row["delta"].split(";")] if row["delta"] else [],
            read_time=float(row["read_time"]), run=int(row["run"]),
        ))
    return out


def write_summary(rows: Sequence[dict[str, Any]], path) -> Path:
    path = Path(path)
    cols = ["algorithm", "n_spins", "source", "target", "sigma", "shots", "threshold", "runs",
            "converged", "median_calls", "q1_calls", "q3_calls", "median_perceived",
            "median_true", "min_true"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in cols])
    return path


def write_metadata(path, cfg: ExperimentConfig, records: Sequence[RunRecord],
                   started: float, extra: dict | None = None) -> Path:
    """Sidecar with config, timestamps and wall times (not part of the data)."""
    meta = {
        "format": SCHEMA, "version": SCHEMA_VERSION,
        "config": cfg.to_mapping(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "elapsed_s": time.time() - started,
        "wall_times": [r.wall_time for r in records],
    }
    if extra:
        meta.update(extra)
    Path(path).write_text(json.dumps(meta, indent=1))
    return Path(path)
