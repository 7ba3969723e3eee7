"""Command-line entry point: ``spinchain-rl <subcommand> [options]``.

Experiment subcommands write their data files into ``--out`` and print the
summary table to stdout as CSV. ``report`` reads an output directory back,
prints the summaries and renders PNG figures next to the data.

Precedence: explicit flags, then the ``--config`` file, then the subcommand
defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness, robustness
from .dynamics import ContractError

log = logging.getLogger("spinchain_rl")

NOISE_GRID = tuple(round(0.01 * k, 2) for k in range(11))

# per-subcommand defaults, in ExperimentConfig field names
DEFAULTS = {
    "cost-sweep": dict(kind="cost-sweep", algorithms=("lbfgs", "ppo", "random"),
                       chain_lengths=(3, 4, 5, 6, 7), sigmas=(0.0,), threshold=0.99),
    "noise-sweep": dict(kind="noise-sweep", algorithms=("lbfgs", "ppo"), chain_lengths=(4,),
                        sigmas=NOISE_GRID, threshold=0.98),
    "train-ppo": dict(kind="cost-sweep", algorithms=("ppo",), chain_lengths=(3,), runs=1,
                      sigmas=(0.0,), threshold=0.99),
    "optimize-lbfgs": dict(kind="cost-sweep", algorithms=("lbfgs",), chain_lengths=(4,), runs=1,
                           sigmas=(0.0,), threshold=0.99),
    "random-search": dict(kind="random-baseline", algorithms=("random",), chain_lengths=(3,),
                          runs=1, sigmas=(0.0,), threshold=0.99),
    "mcra": dict(kind="mcra", algorithms=("lbfgs", "ppo"), chain_lengths=(4,), runs=10,
                 sigmas=(0.0,), threshold=0.99),
    "sphere": dict(kind="sphere", algorithms=("lbfgs",), chain_lengths=(5,),
                   transitions=((0, 4),), runs=10, sigmas=(0.0,), threshold=0.99),
}

FLAG_FIELDS = {
    "chain": "chain_lengths", "transition": "transitions", "sigma": "sigmas", "shots": "shots",
    "runs": "runs", "threshold": "threshold", "budget": "budget", "seed": "master_seed",
    "algorithms": "algorithms", "workers": "workers", "repeats": "repeats",
    "directions": "n_directions",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--chain", type=int, nargs="+", metavar="N", help="chain length(s)")
    p.add_argument("--transition", type=harness.parse_transition, nargs="+", metavar="S:T",
                   help="0-based source:target site pair(s)")
    p.add_argument("--sigma", type=float, nargs="+", help="Hamiltonian perturbation std(s)")
    p.add_argument("--shots", type=int, help="measurement shots M (0 = exact readout)")
    p.add_argument("--runs", type=int, help="runs per cell")
    p.add_argument("--threshold", type=float, help="perceived fidelity threshold")
    p.add_argument("--budget", type=int, help="environment call budget per run")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--algorithms", nargs="+", choices=harness.ALGORITHMS)
    p.add_argument("--workers", type=int, help="worker processes")
    p.add_argument("--repeats", type=int, help="MCRA repeats per controller and level")
    p.add_argument("--directions", type=int, help="sphere scan directions")
    p.add_argument("--config", type=Path, help="JSON or YAML config file")
    p.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spinchain-rl",
        description="Control of spin-chain state transfer: PPO vs L-BFGS vs random search.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "cost-sweep": "env calls vs chain length for each algorithm",
        "noise-sweep": "env calls vs Hamiltonian perturbation noise",
        "train-ppo": "train PPO agents",
        "optimize-lbfgs": "restarted L-BFGS runs",
        "random-search": "random-guessing baseline",
        "mcra": "Monte Carlo robustness analysis of found controllers",
        "sphere": "fidelity along random perturbation directions",
    }
    for name, text in helps.items():
        _add_common(sub.add_parser(name, help=text, description=text))
    rp = sub.add_parser("report", help="summarize an output directory and render figures")
    rp.add_argument("--out", type=Path, default=Path("results"), help="output directory to read")
    rp.add_argument("--no-plots", action="store_true")
    rp.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> harness.ExperimentConfig:
    data = dict(DEFAULTS[args.command])
    if args.config is not None:
        data.update(harness.ExperimentConfig.from_file(args.config).to_mapping())
        # the subcommand decides what kind of experiment runs
        data["kind"] = DEFAULTS[args.command]["kind"]
    for flag, name in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[name] = value
    return harness.ExperimentConfig.from_mapping(data)


# ---------------------------------------------------------------------------
# experiment output


def _tag(alg: str | None, n: int, s: int, t: int) -> str:
    return (f"{alg}_" if alg else "") + f"n{n}_{s}-{t}"


def write_outputs(result: harness.ExperimentResult, out: Path, fmt: str, started: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    harness.export_records(result.records, out / f"runs.{fmt}", fmt)
    harness.write_summary(result.summary, out / "summary.csv")
    extra: dict = {}
    for key, value in result.extras.items():
        what, alg, n, s, t = key
        if what == "mcra":
            robustness.write_mcra_csv(out / f"mcra_{_tag(alg, n, s, t)}.csv", value)
            robustness.write_box_csv(out / f"mcra_box_{_tag(alg, n, s, t)}.csv", value)
            extra.setdefault("mcra", {})[_tag(alg, n, s, t)] = {
                "median_trend": robustness.median_trend(value),
                "selection": "highest median of pooled samples over all levels",
            }
        elif what == "sphere":
            ctrl, scan = value
            tag = _tag(None, n, s, t)
            robustness.write_sphere_csv(out / f"sphere_{tag}.csv", scan)
            _write_densities(out / f"sphere_density_{tag}.csv", scan)
            zero = np.isclose(scan.strengths, 0.0)
            stats = {
                "delta": list(ctrl.delta), "read_time": ctrl.read_time,
                "improving_fraction": scan.improving_fraction(),
                "stationary_fraction": scan.stationary_fraction(),
                "slope_tolerance": robustness.SLOPE_TOL,
                "zero_spread": float(np.ptp(scan.curves[:, zero])) if zero.any() else None,
                "fidelity_at_zero": float(scan.curves[0, zero][0]) if zero.any() else None,
            }
            (out / f"sphere_{tag}.json").write_text(json.dumps(stats, indent=1))
            extra.setdefault("sphere", {})[tag] = stats
    harness.write_metadata(out / "meta.json", result.config, result.records, started, extra)


def _write_densities(path: Path, scan: robustness.SphereScan) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strength", "bin_low", "bin_high", "density"])
        for s, hist in scan.densities.items():
            for lo, hi, d in zip(scan.bin_edges[:-1], scan.bin_edges[1:], hist):
                w.writerow([repr(s), repr(float(lo)), repr(float(hi)), repr(float(d))])


def print_summary(rows, stream=None) -> None:
    stream = stream or sys.stdout
    if not rows:
        print("# no runs", file=stream)
        return
    w = csv.DictWriter(stream, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


# ---------------------------------------------------------------------------
# report


def _read_table(path: Path) -> list[dict]:
    with path.open() as fh:
        return list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))


def report(out: Path, plots: bool = True, stream=None) -> list[Path]:
    """Recompute summaries from raw files in ``out`` and render figures there."""
    stream = stream or sys.stdout
    if not out.is_dir():
        raise FileNotFoundError(f"no output directory at {out}")
    written: list[Path] = []
    runs_file = next((p for p in (out / "runs.csv", out / "runs.json") if p.exists()), None)
    if runs_file is None:
        raise FileNotFoundError(f"{out} has no runs.csv or runs.json")
    records = harness.load_records(runs_file)
    rows = harness.summarize(records)
    print("## summary", file=stream)
    print_summary(rows, stream)
    if plots:
        from . import plots as P

        x = "sigma" if len({r.sigma for r in records}) > 1 else "n_spins"
        if records:
            written.append(P.plot_cost(rows, out / "cost.png", x=x))
            written.append(P.plot_true_fidelity(records, out / "fidelity.png", x=x))

    for path in sorted(out.glob("mcra_*.csv")):
        if path.name.startswith("mcra_box_"):
            continue
        table = _read_table(path)
        levels = sorted({float(r["sigma"]) for r in table})
        samples = [np.array([float(r["fidelity"]) for r in table if float(r["sigma"]) == s])
                   for s in levels]
        dists = [robustness.FidelityDistribution(s, x[None, :]) for s, x in zip(levels, samples)]
        print(f"## {path.stem}", file=stream)
        print("sigma,median,q1,q3", file=stream)
        for d in dists:
            print(f"{d.sigma!r},{d.box.median!r},{d.box.q1!r},{d.box.q3!r}", file=stream)
        print(f"median_trend,{robustness.median_trend(dists)!r}", file=stream)
        if plots:
            written.append(P.plot_mcra(levels, samples, out / f"{path.stem}.png", title=path.stem))

    for path in sorted(out.glob("sphere_n*.csv")):
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        with path.open() as fh:
            header = fh.readline().strip().split(",")
        strengths = np.array([float(h) for h in header[1:-1]])
        curves, slopes = table[:, 1:-1], table[:, -1]
        print(f"## {path.stem}", file=stream)
        print(f"directions,{curves.shape[0]}", file=stream)
        print(f"improving_fraction,{float(np.mean(slopes > robustness.SLOPE_TOL))!r}",
              file=stream)
        if plots:
            written.append(P.plot_sphere(strengths, curves, out / f"{path.stem}.png",
                                         title=path.stem))
            dens_path = out / path.name.replace("sphere_", "sphere_density_")
            if dens_path.exists():
                dt = _read_table(dens_path)
                keys = sorted({float(r["strength"]) for r in dt})
                edges = np.array(sorted({float(r["bin_low"]) for r in dt}
                                        | {float(r["bin_high"]) for r in dt}))
                dens = {k: np.array([float(r["density"]) for r in dt
                                     if float(r["strength"]) == k]) for k in keys}
                written.append(P.plot_densities(edges, dens, out / f"{dens_path.stem}.png",
                                                title=dens_path.stem))
    for p in written:
        print(f"# figure {p}", file=stream)
    return written


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "report":
            report(args.out, plots=not args.no_plots)
            return 0
        cfg = resolve_config(args)
        started = time.time()
        result = harness.run_experiment(cfg)
        write_outputs(result, args.out, args.format, started)
        print_summary(result.summary)
    except (ContractError, ValueError) as exc:
        print(f"spinchain-rl: configuration error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"spinchain-rl: I/O error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
