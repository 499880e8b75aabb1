"""Experiment orchestration: base training, pruning runs, CSV and manifest output."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import platform
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from ..netzoo import ARCHITECTURES, Network, NetworkSpec, build_network, widen_layer
from ..pruner import ExperimentRecord, LoopResult, parse_strategy, prune_finetune_loop
from ..tensorcore import accuracy, sgd_train
from ..tensorcore.serialize import weights_to_bytes
from .config import ExperimentConfig, parse_config
from .data import Dataset, load_dataset

log = logging.getLogger(__name__)

CSV_HEADER = "step,cum_pruned,frac_pruned,accuracy_mean,accuracy_std,layer_census"


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def fmt(x: float) -> str:
    return format(x, ".17g")


@dataclass
class TrainLog:
    epochs: int
    best_epoch: int
    best_score_accuracy: float
    history: list[float]


def train_to_plateau(
    network: Network,
    data: Dataset,
    learning_rate: float,
    momentum: float,
    batch_size: int,
    max_epochs: int,
    patience: int,
    seed: int,
) -> tuple[Network, TrainLog]:
    """Momentum SGD, one score-split evaluation per epoch; keeps the best network.

    Stops after ``patience`` evaluations without improvement.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    updates = max(1, len(data.x_train) // batch_size)
    best, best_acc, best_epoch = network, -1.0, 0
    history = []
    for epoch in range(1, max_epochs + 1):
        network = sgd_train(network, data.x_train, data.y_train, updates, batch_size, learning_rate, momentum, rng)
        acc = accuracy(network, data.x_score, data.y_score)
        history.append(acc)
        log.info("epoch %d score-split accuracy %.4f", epoch, acc)
        if acc > best_acc:
            best, best_acc, best_epoch = network, acc, epoch
        elif epoch - best_epoch >= patience:
            break
    return best, TrainLog(len(history), best_epoch, best_acc, history)


def base_network(config: ExperimentConfig) -> tuple[Network, int | None]:
    """Untrained network for the config (widened if requested) and the added-filter count."""
    spec_fn = ARCHITECTURES.get(config.architecture)
    if spec_fn is None:
        raise ValueError(f"unknown architecture {config.architecture!r}; have {sorted(ARCHITECTURES)}")
    net = build_network(spec_fn(), config.seed)
    if config.widen_layer is None:
        return net, None
    before = net.census[config.widen_layer]
    # a widened network is trained from scratch, so the fresh init of the wide layer is what we want
    net = widen_layer(net, config.widen_layer, config.widen_factor, config.seed + 1)
    return net, net.census[config.widen_layer] - before


def train_base(config: ExperimentConfig, data: Dataset) -> tuple[Network, TrainLog, int | None]:
    net, added = base_network(config)
    net, train_log = train_to_plateau(
        net, data, config.lr_train, config.momentum, config.batch_size, config.max_epochs, config.patience, config.seed
    )
    return net, train_log, added


def records_to_csv(records: list[ExperimentRecord], comments: dict[str, str]) -> str:
    buf = io.StringIO(newline="")
    for key, value in comments.items():
        buf.write(f"# {key}: {value}\n")
    buf.write(CSV_HEADER + "\n")
    for r in records:
        buf.write(
            ",".join(
                [str(r.step), str(r.cum_pruned), fmt(r.frac_pruned), fmt(r.accuracy_mean), fmt(r.accuracy_std), r.census_text()]
            )
            + "\n"
        )
    return buf.getvalue()


def read_records_csv(path) -> list[dict]:
    rows = []
    header = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#") or not line:
            continue
        if header is None:
            header = line.split(",")
            continue
        vals = dict(zip(header, line.split(",")))
        rows.append(
            {
                "step": int(vals["step"]),
                "cum_pruned": int(vals["cum_pruned"]),
                "frac_pruned": float(vals["frac_pruned"]),
                "accuracy_mean": float(vals["accuracy_mean"]),
                "accuracy_std": float(vals["accuracy_std"]),
                "layer_census": vals["layer_census"],
            }
        )
    return rows


def strategy_filename(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", label.lower()).strip("-") + ".csv"


def write_text(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def run_strategies(
    config: ExperimentConfig,
    network: Network,
    data: Dataset,
    fraction_base: int | None,
    out_dir: Path,
    threads: int = 1,
) -> dict[str, dict]:
    """Run every configured strategy from ``network`` and write one CSV per strategy."""
    schedule = config.schedule(fraction_base)
    results = {}
    for label in config.strategies:
        strategy = parse_strategy(label)
        t0 = time.perf_counter()
        result: LoopResult = prune_finetune_loop(
            network, strategy, schedule, data.train, data.test, config.seed, data.score, threads
        )
        comments = {
            "strategy": strategy.label,
            "schedule": (
                f"filters_per_step={schedule.filters_per_step} finetune_updates={schedule.finetune_updates_per_step} "
                f"batch_size={schedule.batch_size} lr={schedule.learning_rate} momentum={schedule.momentum} "
                f"repetitions={schedule.repetitions} stop_fraction={schedule.stop_at_fraction} "
                f"total_steps={schedule.total_steps} fraction_base={schedule.fraction_base or sum(network.census)}"
            ),
        }
        if result.terminated:
            comments["terminated"] = result.terminated
        name = strategy_filename(strategy.label)
        text = records_to_csv(result.records, comments)
        write_text(out_dir / name, text)
        results[label] = {
            "csv": name,
            "sha1": git_blob_hash(text.encode()),
            "steps": len(result.records) - 1,
            "terminated": result.terminated,
            "seconds": time.perf_counter() - t0,
        }
        log.info("%s: %d steps in %.1fs", label, len(result.records) - 1, results[label]["seconds"])
    return results


def result_dir(config: ExperimentConfig, out_root) -> Path:
    return Path(out_root) / f"exp-{config.digest()[:12]}"


def run_experiment(config: ExperimentConfig | str | Path, out_root=".", threads: int = 1) -> Path:
    """Train the base network, run every strategy, write CSVs plus manifest.json.

    ``config`` may be an :class:`ExperimentConfig`, a config file, or a
    manifest.json from an earlier run (which re-runs that configuration).
    """
    if not isinstance(config, ExperimentConfig):
        config = load_config_or_manifest(config)
    out = result_dir(config, out_root)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    data = load_dataset(config.dataset_spec())
    net, train_log, added = train_base(config, data)
    weights = weights_to_bytes(net)
    (out / "base.plab").write_bytes(weights)
    write_text(out / "base.spec", net.spec.to_text())
    base_acc = accuracy(net, data.x_test, data.y_test)
    log.info("base network: census %s, test accuracy %.4f", net.census, base_acc)
    train_seconds = time.perf_counter() - t0
    runs = run_strategies(config, net, data, added, out, threads)
    manifest = {
        "config_text": config.to_text(),
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(config).items()},
        "config_sha256": config.digest(),
        "base_weights_sha1": git_blob_hash(weights),
        "base_census": net.census,
        "base_parameters": net.num_parameters,
        "base_test_accuracy": base_acc,
        "fraction_base": added or sum(net.census),
        "train": vars(train_log),
        "runs": runs,
        "timings": {"train_seconds": train_seconds, "total_seconds": time.perf_counter() - t0},
        "versions": {"prunelab": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_config_or_manifest(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    if Path(path).suffix == ".json":
        return parse_config(json.loads(text)["config_text"])
    return parse_config(text)


def load_network(weights_path, spec_path) -> Network:
    from ..tensorcore.serialize import load_weights

    spec = NetworkSpec.from_text(Path(spec_path).read_text(encoding="utf-8"))
    return load_weights(weights_path, build_network(spec, 0))
