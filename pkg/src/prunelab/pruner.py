"""Taylor saliency, filter selection strategies and the prune/fine-tune loop."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np

from .netzoo import Network, remove_filters
from .tensorcore import accuracy, backward, forward, sgd_train


class StrategyError(ValueError):
    pass


@dataclass(frozen=True)
class SaliencyMap:
    scores: list[np.ndarray]  # one array per conv layer, after normalization
    raw: list[np.ndarray]  # before normalization
    batches: int
    normalized: bool = True


def taylor_scores(network: Network, eval_batches: Iterable, batches: int | None = None) -> SaliencyMap:
    """|mean(activation * dloss/dactivation)| per filter, averaged over batches, L2-normalized per layer.

    ``eval_batches`` yields (x, y) pairs; at most ``batches`` are consumed.
    """
    if batches is not None and batches < 1:
        raise ValueError("batches must be >= 1")
    totals = None
    used = 0
    for x, y in eval_batches:
        _, tape, acts = forward(network, x, y)
        grads = backward(tape).activations
        per_batch = [np.abs((a * g).mean(axis=(0, 2, 3))) for a, g in zip(acts, grads)]
        totals = per_batch if totals is None else [t + s for t, s in zip(totals, per_batch)]
        used += 1
        if batches is not None and used >= batches:
            break
    if not used:
        raise ValueError("eval_batches is empty")
    raw = [t / used for t in totals]
    scores = []
    for r in raw:
        norm = np.sqrt(np.sum(r * r))
        scores.append(r / norm if norm > 0 else r.copy())
    return SaliencyMap(scores, raw, used)


def iter_batches(x: np.ndarray, y: np.ndarray, batch_size: int):
    for i in range(0, len(x), batch_size):
        yield x[i : i + batch_size], y[i : i + batch_size]


# strategies


@dataclass(frozen=True)
class Fixed:
    index: int


@dataclass(frozen=True)
class MostFilters:
    pass


Target = Union[Fixed, MostFilters]


@dataclass(frozen=True)
class GlobalTaylor:
    needs_scores = True

    @property
    def label(self) -> str:
        return "global-taylor"


@dataclass(frozen=True)
class LayerRandom:
    target: Target
    needs_scores = False

    @property
    def label(self) -> str:
        return "layer-random:" + _target_label(self.target)


@dataclass(frozen=True)
class LayerTaylor:
    target: Target
    needs_scores = True

    @property
    def label(self) -> str:
        return "layer-taylor:" + _target_label(self.target)


Strategy = Union[GlobalTaylor, LayerRandom, LayerTaylor]


def _target_label(target: Target) -> str:
    return "most" if isinstance(target, MostFilters) else str(target.index)


def parse_strategy(text: str) -> Strategy:
    """``global-taylor``, ``layer-random:<conv index>|most`` or ``layer-taylor:<conv index>|most``."""
    text = text.strip()
    if text == "global-taylor":
        return GlobalTaylor()
    name, _, target = text.partition(":")
    if name not in ("layer-random", "layer-taylor") or not target:
        raise StrategyError(f"unknown strategy {text!r}")
    if target == "most":
        t: Target = MostFilters()
    else:
        try:
            t = Fixed(int(target))
        except ValueError:
            raise StrategyError(f"bad layer target {target!r} in {text!r}")
    return LayerRandom(t) if name == "layer-random" else LayerTaylor(t)


def resolve_target(target: Target, census: list[int]) -> int:
    if isinstance(target, MostFilters):
        return int(np.argmax(census))  # first maximum: lowest layer index
    if not 0 <= target.index < len(census):
        raise StrategyError(f"conv layer {target.index} does not exist (have {len(census)})")
    return target.index


def select_filters(
    strategy: Strategy,
    scores: SaliencyMap | None,
    network: Network,
    k: int,
    rng_seed: int,
) -> list[tuple[int, int]]:
    """Pick k (conv layer, filter) pairs to remove, in selection order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    census = network.census
    if strategy.needs_scores:
        if scores is None:
            raise StrategyError(f"{strategy.label} needs saliency scores")
        if [len(s) for s in scores.scores] != census:
            raise StrategyError("saliency map does not match the network's filter census")

    if isinstance(strategy, GlobalTaylor):
        candidates = sorted(
            (float(s), layer, f) for layer, layer_scores in enumerate(scores.scores) for f, s in enumerate(layer_scores)
        )
        left = list(census)
        picked = []
        for _, layer, f in candidates:
            if left[layer] > 1:
                picked.append((layer, f))
                left[layer] -= 1
                if len(picked) == k:
                    return picked
        raise StrategyError(f"cannot remove {k} filters without emptying a layer")

    layer = resolve_target(strategy.target, census)
    if census[layer] < k + 1:
        raise StrategyError(f"conv layer {layer} has {census[layer]} filters; need at least {k + 1} to remove {k}")
    if isinstance(strategy, LayerTaylor):
        order = sorted(range(census[layer]), key=lambda f: (float(scores.scores[layer][f]), f))
        return [(layer, f) for f in order[:k]]
    rng = np.random.default_rng(rng_seed)
    return [(layer, int(f)) for f in rng.choice(census[layer], size=k, replace=False)]


def apply_selection(network: Network, selection: list[tuple[int, int]]) -> Network:
    by_layer: dict[int, list[int]] = {}
    for layer, f in selection:
        by_layer.setdefault(layer, []).append(f)
    for layer in sorted(by_layer):
        network = remove_filters(network, layer, sorted(by_layer[layer]))
    return network


# prune / fine-tune loop


@dataclass(frozen=True)
class PruneSchedule:
    filters_per_step: int = 2
    finetune_updates_per_step: int = 50
    batch_size: int = 32
    total_steps: int | None = None
    stop_at_fraction: float | None = None
    repetitions: int = 5
    learning_rate: float = 0.01
    momentum: float = 0.9
    score_batches: int = 4
    # denominator of frac_pruned; defaults to the starting conv filter total
    fraction_base: int | None = None

    def __post_init__(self):
        for name in ("filters_per_step", "finetune_updates_per_step", "batch_size", "repetitions", "score_batches"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_steps is None and self.stop_at_fraction is None:
            raise ValueError("schedule needs total_steps or stop_at_fraction")
        if self.total_steps is not None and self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")


@dataclass(frozen=True)
class StepResult:
    step: int
    cum_pruned: int
    accuracy: float
    census: tuple[int, ...]
    num_parameters: int
    seconds: float


@dataclass(frozen=True)
class ExperimentRecord:
    step: int
    cum_pruned: int
    frac_pruned: float
    accuracy_mean: float
    accuracy_std: float
    census: tuple[tuple[int, ...], ...]  # one census per repetition
    wall_seconds: float
    repetitions: int

    def census_text(self) -> str:
        distinct = list(dict.fromkeys(self.census))
        return "|".join(";".join(str(c) for c in cen) for cen in distinct)


@dataclass
class Trajectory:
    steps: list[StepResult] = field(default_factory=list)
    terminated: str | None = None  # reason when the stop condition was unreachable


def _seed(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(p) for p in parts])


def run_trajectory(
    network: Network,
    strategy: Strategy,
    schedule: PruneSchedule,
    train_set,
    test_set,
    score_set,
    rng_seed: int,
    repetition: int = 0,
) -> Trajectory:
    """One repetition: score, select, remove, fine-tune, evaluate, until the stop condition."""
    x_train, y_train = train_set
    x_test, y_test = test_set
    x_score, y_score = score_set
    base = schedule.fraction_base or sum(network.census)
    # fine-tuning draws do not depend on the strategy, so identical selections give identical runs
    train_rng = np.random.default_rng(_seed(rng_seed, repetition, 0))
    select_seeds = np.random.default_rng(_seed(rng_seed, repetition, 1))

    t0 = time.perf_counter()
    traj = Trajectory()
    traj.steps.append(
        StepResult(0, 0, accuracy(network, x_test, y_test), tuple(network.census), network.num_parameters, 0.0)
    )
    step, pruned = 0, 0
    while True:
        if schedule.total_steps is not None and step >= schedule.total_steps:
            break
        if schedule.stop_at_fraction is not None and pruned / base >= schedule.stop_at_fraction:
            break
        seed = int(select_seeds.integers(2**63))
        scores = None
        if strategy.needs_scores:
            scores = taylor_scores(
                network, iter_batches(x_score, y_score, schedule.batch_size), schedule.score_batches
            )
        try:
            selection = select_filters(strategy, scores, network, schedule.filters_per_step, seed)
        except StrategyError as exc:
            traj.terminated = str(exc)
            break
        network = apply_selection(network, selection)
        network = sgd_train(
            network,
            x_train,
            y_train,
            schedule.finetune_updates_per_step,
            schedule.batch_size,
            schedule.learning_rate,
            schedule.momentum,
            train_rng,
        )
        step += 1
        pruned += len(selection)
        traj.steps.append(
            StepResult(
                step,
                pruned,
                accuracy(network, x_test, y_test),
                tuple(network.census),
                network.num_parameters,
                time.perf_counter() - t0,
            )
        )
    return traj


def aggregate(trajectories: list[Trajectory], fraction_base: int) -> list[ExperimentRecord]:
    """Mean/std over repetitions at every step all repetitions reached."""
    n_steps = min(len(t.steps) for t in trajectories)
    out = []
    for i in range(n_steps):
        rows = [t.steps[i] for t in trajectories]
        acc = np.array([r.accuracy for r in rows])
        out.append(
            ExperimentRecord(
                step=rows[0].step,
                cum_pruned=rows[0].cum_pruned,
                frac_pruned=rows[0].cum_pruned / fraction_base,
                accuracy_mean=float(acc.mean()),
                accuracy_std=float(acc.std()),
                census=tuple(r.census for r in rows),
                wall_seconds=max(r.seconds for r in rows),
                repetitions=len(rows),
            )
        )
    return out


@dataclass
class LoopResult:
    records: list[ExperimentRecord]
    trajectories: list[Trajectory]

    @property
    def terminated(self) -> str | None:
        reasons = [t.terminated for t in self.trajectories if t.terminated]
        return reasons[0] if reasons else None


def prune_finetune_loop(
    network: Network,
    strategy: Strategy,
    schedule: PruneSchedule,
    train_set,
    test_set,
    rng_seed: int,
    score_set=None,
    threads: int = 1,
) -> LoopResult:
    """Run ``schedule.repetitions`` independent trajectories and aggregate them.

    Every repetition starts from the same ``network``. ``score_set``
    defaults to ``train_set``.
    """
    score_set = train_set if score_set is None else score_set
    base = schedule.fraction_base or sum(network.census)

    def one(r):
        return run_trajectory(network, strategy, schedule, train_set, test_set, score_set, rng_seed, r)

    reps = range(schedule.repetitions)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            trajectories = list(pool.map(one, reps))
    else:
        trajectories = [one(r) for r in reps]
    return LoopResult(aggregate(trajectories, base), trajectories)
