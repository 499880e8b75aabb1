"""Command line entry point: ``prunelab {simulate,train,prune,experiment}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .harness.config import ConfigError, override
from .harness.data import DatasetError, load_dataset
from .harness.experiment import (
    fmt,
    load_config_or_manifest,
    load_network,
    result_dir,
    run_experiment,
    run_strategies,
    train_base,
    write_text,
)
from .netzoo import SpecError
from .pruner import StrategyError
from .stat_model import (
    SCENARIOS,
    ModelError,
    build_contribution_model,
    chebyshev_bound_check,
    check_ordering,
    convergence_sweep,
    estimate_scenarios,
)
from .tensorcore.serialize import WeightFileError, weights_to_bytes

log = logging.getLogger("prunelab")


def _common() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags sit before or after the subcommand without clobbering each other
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides the config)")
    p.add_argument("--out-dir", default=argparse.SUPPRESS, help="output root (default: results)")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads (default: 1)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="prunelab", parents=[common], description=__doc__)
    parser.add_argument("--version", action="version", version=f"prunelab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", parents=[common], help="Monte Carlo scenario values and concentration checks")
    sim.add_argument("--m", type=int, default=10, help="filters in the small layer")
    sim.add_argument("--n", type=int, default=1000, help="filters in the large layer")
    sim.add_argument("--dist", default="uniform-positive:0.5,1", help="second-layer law, family:location,scale")
    sim.add_argument("--first-dist", default=None, help="first-layer law (default: same as --dist)")
    sim.add_argument("--a", type=float, default=None, help="first-layer threshold (default 0.9 m mean)")
    sim.add_argument("--b", type=float, default=None, help="second-layer threshold (default 0.8 n mean)")
    sim.add_argument("--c2", type=float, default=0.0, help="fraction of n forming correlated pairs")
    sim.add_argument("--corr-strength", type=float, default=0.0, help="shared-component weight in a pair")
    sim.add_argument("--trials", type=int, default=100_000)
    sim.add_argument("--drop-k", type=int, default=1, help="filters removed per scenario")
    sim.add_argument("--epsilon", type=float, nargs="*", default=[], help="Chebyshev check at these epsilons")
    sim.add_argument("--sweep-n", type=int, nargs="*", default=[], help="weak-law sweep over these n")

    for name, text in (("train", "train the base network of a config"),
                       ("prune", "run the config's strategies from saved weights"),
                       ("experiment", "train and prune end to end, with a manifest")):  # fmt: skip
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("config", help="config file (or manifest.json for experiment)")
        if name == "prune":
            p.add_argument("--weights", help="PLAB weights (default: base.plab in the result directory)")
            p.add_argument("--spec", help="network spec text (default: base.spec next to the weights)")
    return parser


def _simulate(args) -> int:
    seed = getattr(args, "seed", 0)
    workers = getattr(args, "threads", 1)
    out = Path(getattr(args, "out_dir", "results"))
    model = build_contribution_model(
        args.m, args.n, args.dist, first_dist=args.first_dist, a=args.a, b=args.b,
        corr_pair_fraction=args.c2, corr_strength=args.corr_strength,
    )  # fmt: skip
    t0 = time.perf_counter()
    est = estimate_scenarios(model, args.trials, seed, drop_k=args.drop_k, workers=workers)
    report = check_ordering(est)
    out.mkdir(parents=True, exist_ok=True)
    header = (
        f"# m={model.m} n={model.n} a={fmt(model.a)} b={fmt(model.b)} dist={args.dist} "
        f"c2={fmt(args.c2)} corr_strength={fmt(args.corr_strength)} trials={args.trials} seed={seed} drop_k={args.drop_k}\n"
    )
    rows = [f"{s},{fmt(getattr(est, s))},{fmt(est.half_widths[s])}" for s in SCENARIOS]
    write_text(out / "scenarios.csv", header + "scenario,estimate,half_width\n" + "\n".join(rows) + "\n")
    for s in SCENARIOS:
        print(f"{s:5s} {getattr(est, s):.6f} +/- {est.half_widths[s]:.6f}")
    for p in report.pairs:
        print(f"{p.lower} <= {p.upper}: margin {p.margin:+.6f} slack {p.slack:.6f} {'ok' if p.holds else 'VIOLATED'}")
    print(f"ordering {'holds' if report.holds else 'violated'} ({time.perf_counter() - t0:.1f}s)")

    if args.epsilon:
        lines = ["epsilon,n,empirical_lhs,standard_error,chebyshev_rhs,satisfied"]
        for eps in args.epsilon:
            r = chebyshev_bound_check(model, eps, args.trials, seed, workers=workers)
            lines.append(f"{fmt(eps)},{r.n},{fmt(r.empirical_lhs)},{fmt(r.standard_error)},{fmt(r.chebyshev_rhs)},{int(r.satisfied)}")
            print(f"chebyshev eps={eps}: lhs {r.empirical_lhs:.6f} rhs {r.chebyshev_rhs:.6f} {'ok' if r.satisfied else 'VIOLATED'}")
        write_text(out / "chebyshev.csv", header + "\n".join(lines) + "\n")
    if args.sweep_n:
        eps = args.epsilon[0] if args.epsilon else 0.05
        rows = convergence_sweep(model, args.sweep_n, eps, args.trials, seed, workers=workers)
        lines = ["n,empirical_lhs,standard_error,chebyshev_rhs,p_sum_exceeds_b,p_sum_minus_min_exceeds_b"]
        for r in rows:
            lines.append(
                f"{r.n},{fmt(r.empirical_lhs)},{fmt(r.standard_error)},{fmt(r.chebyshev_rhs)},"
                f"{fmt(r.p_sum_exceeds_b)},{fmt(r.p_sum_minus_min_exceeds_b)}"
            )
            print(f"sweep n={r.n}: lhs {r.empirical_lhs:.6f} rhs {r.chebyshev_rhs:.6f}")
        write_text(out / "sweep.csv", header + f"# epsilon={fmt(eps)}\n" + "\n".join(lines) + "\n")
    return 0


def _config(args):
    config = load_config_or_manifest(args.config)
    return override(config, seed=getattr(args, "seed", None))


def _train(args) -> int:
    config = _config(args)
    out = result_dir(config, getattr(args, "out_dir", "results"))
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(config.dataset_spec())
    net, train_log, added = train_base(config, data)
    (out / "base.plab").write_bytes(weights_to_bytes(net))
    write_text(out / "base.spec", net.spec.to_text())
    write_text(out / "config.txt", config.to_text())
    info = {"census": net.census, "added_filters": added, "train": vars(train_log)}
    write_text(out / "train.json", json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(f"trained {net.census} to score-split accuracy {train_log.best_score_accuracy:.4f}; wrote {out}")
    return 0


def _prune(args) -> int:
    config = _config(args)
    out = result_dir(config, getattr(args, "out_dir", "results"))
    weights = Path(args.weights) if args.weights else out / "base.plab"
    spec = Path(args.spec) if args.spec else weights.with_suffix(".spec")
    net = load_network(weights, spec)
    added = None
    train_info = weights.parent / "train.json"
    if config.widen_layer is not None and train_info.exists():
        added = json.loads(train_info.read_text(encoding="utf-8"))["added_filters"]
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(config.dataset_spec())
    runs = run_strategies(config, net, data, added, out, getattr(args, "threads", 1))
    for label, r in runs.items():
        print(f"{label}: {r['steps']} steps -> {out / r['csv']}" + (f" (stopped: {r['terminated']})" if r["terminated"] else ""))
    return 0


def _experiment(args) -> int:
    config = _config(args)
    out = run_experiment(config, getattr(args, "out_dir", "results"), getattr(args, "threads", 1))
    print(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    if getattr(args, "threads", 1) < 1:
        print("prunelab: --threads must be >= 1", file=sys.stderr)
        return 2
    handlers = {"simulate": _simulate, "train": _train, "prune": _prune, "experiment": _experiment}
    try:
        return handlers[args.command](args)
    except (ConfigError, DatasetError, ModelError, SpecError, StrategyError, WeightFileError, FileNotFoundError) as exc:
        print(f"prunelab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
