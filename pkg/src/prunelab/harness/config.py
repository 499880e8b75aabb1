"""Plain-text experiment configuration.

One ``key = value`` per line, ``#`` starts a comment. Unknown keys and
malformed values are reported with their line number. Example::

    architecture = mini-a
    dataset = synthetic
    widen_layer = 2          # conv index, 0-based
    widen_factor = 4
    strategies = layer-random:2, global-taylor
    stop_fraction = 0.5
    repetitions = 5
    seed = 0
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields

from ..pruner import PruneSchedule, parse_strategy
from .data import DatasetSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    architecture: str = "mini-a"
    dataset: str = "synthetic"
    data_path: str | None = None
    train_size: int = 2000
    score_size: int = 500
    test_size: int = 500
    separability: float = 0.5
    data_seed: int = 0
    widen_layer: int | None = None
    widen_factor: int = 4
    strategies: tuple[str, ...] = ("global-taylor",)
    filters_per_step: int = 2
    finetune_updates: int = 50
    batch_size: int = 32
    total_steps: int | None = None
    stop_fraction: float | None = None
    repetitions: int = 5
    score_batches: int = 4
    seed: int = 0
    lr_train: float = 0.01
    lr_finetune: float = 0.01
    momentum: float = 0.9
    max_epochs: int = 40
    patience: int = 5

    def __post_init__(self):
        for s in self.strategies:
            parse_strategy(s)
        if self.total_steps is None and self.stop_fraction is None:
            raise ConfigError("config needs total_steps or stop_fraction")

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            source=self.dataset,
            path=self.data_path,
            train_size=self.train_size,
            score_size=self.score_size,
            test_size=self.test_size,
            seed=self.data_seed,
            separability=self.separability,
            batch_size=self.batch_size,
        )

    def schedule(self, fraction_base: int | None = None) -> PruneSchedule:
        return PruneSchedule(
            filters_per_step=self.filters_per_step,
            finetune_updates_per_step=self.finetune_updates,
            batch_size=self.batch_size,
            total_steps=self.total_steps,
            stop_at_fraction=self.stop_fraction,
            repetitions=self.repetitions,
            learning_rate=self.lr_finetune,
            momentum=self.momentum,
            score_batches=self.score_batches,
            fraction_base=fraction_base,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, tuple):
                value = ", ".join(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _convert(name: str, annotation: str, raw: str):
    if annotation.startswith("tuple"):
        return tuple(p.strip() for p in raw.split(",") if p.strip())
    optional = "None" in annotation
    if optional and raw.lower() in ("none", ""):
        return None
    if annotation.startswith("int"):
        return int(raw)
    if annotation.startswith("float"):
        return float(raw)
    return raw


def parse_config(text: str) -> ExperimentConfig:
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = (p.strip() for p in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _convert(key, str(types[key]), raw)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {raw!r} for {key}")
    try:
        return ExperimentConfig(**values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def override(config: ExperimentConfig, **changes) -> ExperimentConfig:
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(config, **changes) if changes else config
