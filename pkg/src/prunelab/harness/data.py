"""Datasets: the CIFAR-10 binary format and a synthetic blob generator."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 channel-planar pixels
IMAGE_SHAPE = (3, 32, 32)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"  # "synthetic" or "cifar10"
    path: str | None = None
    class_count: int = 10
    image_shape: tuple[int, int, int] = IMAGE_SHAPE
    train_size: int = 2000
    score_size: int = 500
    test_size: int = 500
    seed: int = 0
    # synthetic only
    separability: float = 1.0
    noise: float = 1.0
    jitter: int = 4
    blobs: int = 3
    distractors: int = 3
    batch_size: int = 32

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10"):
            raise DatasetError(f"unknown dataset source {self.source!r}")
        for name in ("train_size", "score_size", "test_size"):
            if getattr(self, name) < self.batch_size:
                raise DatasetError(f"{name}={getattr(self, name)} is smaller than batch size {self.batch_size}")


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_score: np.ndarray
    y_score: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    # indices into the source pools, for provenance and split-hygiene checks
    train_idx: np.ndarray
    score_idx: np.ndarray
    test_idx: np.ndarray
    # "pool" names which source each split's indices refer to
    test_pool: str = "train"

    @property
    def train(self):
        return self.x_train, self.y_train

    @property
    def score(self):
        return self.x_score, self.y_score

    @property
    def test(self):
        return self.x_test, self.y_test


def read_cifar10_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 binary batch into (uint8 images N x 3 x 32 x 32, labels)."""
    raw = np.fromfile(path, dtype=np.uint8)
    whole = raw.size // RECORD_BYTES * RECORD_BYTES
    if raw.size != whole:
        raise DatasetError(
            f"{path}: truncated record at byte offset {whole} "
            f"({raw.size} bytes is not a multiple of {RECORD_BYTES})"
        )
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise DatasetError(f"{path}: record {i} (byte offset {i * RECORD_BYTES}) has label {labels[i]} > 9")
    return records[:, 1:].reshape(-1, *IMAGE_SHAPE), labels


def _cifar_pools(path: Path):
    if path.is_file():
        x, y = read_cifar10_file(path)
        return (x, y), None
    train_files = sorted(path.glob("data_batch_*.bin"))
    test_file = path / "test_batch.bin"
    if not train_files:
        raise DatasetError(f"no data_batch_*.bin files under {path}")
    parts = [read_cifar10_file(f) for f in train_files]
    train = (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    test = read_cifar10_file(test_file) if test_file.exists() else None
    return train, test


def resolve_data_path(path: str | None) -> Path:
    """Relative paths (and a missing path) resolve against $PRUNELAB_DATA."""
    root = os.environ.get("PRUNELAB_DATA")
    if path is None:
        if root is None:
            raise DatasetError("no dataset path given and PRUNELAB_DATA is not set")
        return Path(root)
    p = Path(path)
    if not p.is_absolute() and root is not None and not p.exists():
        p = Path(root) / p
    if not p.exists():
        raise DatasetError(f"dataset path {p} does not exist")
    return p


def _normalize(train, *others):
    mean = train.mean(axis=(0, 2, 3), keepdims=True)
    std = train.std(axis=(0, 2, 3), keepdims=True)
    std[std == 0] = 1.0
    return [(a - mean) / std for a in (train,) + others]


def load_cifar10(path, spec: DatasetSpec) -> Dataset:
    """Subsample disjoint train/score/test splits and normalize with train-split statistics.

    ``path`` is one binary batch file or a directory holding
    ``data_batch_*.bin`` (and optionally ``test_batch.bin``).
    """
    (x_pool, y_pool), test_pool = _cifar_pools(resolve_data_path(path))
    rng = np.random.default_rng(spec.seed)
    need = spec.train_size + spec.score_size + (0 if test_pool else spec.test_size)
    if need > len(x_pool):
        raise DatasetError(f"need {need} images but the source holds {len(x_pool)}")
    perm = rng.permutation(len(x_pool))
    train_idx = perm[: spec.train_size]
    score_idx = perm[spec.train_size : spec.train_size + spec.score_size]
    if test_pool is None:
        test_idx = perm[spec.train_size + spec.score_size : need]
        x_t, y_t, pool_name = x_pool, y_pool, "train"
    else:
        x_t, y_t = test_pool
        if spec.test_size > len(x_t):
            raise DatasetError(f"need {spec.test_size} test images, test batch holds {len(x_t)}")
        test_idx = rng.permutation(len(x_t))[: spec.test_size]
        pool_name = "test"
    to_float = lambda a: a.astype(np.float64) / 255.0
    xs = _normalize(to_float(x_pool[train_idx]), to_float(x_pool[score_idx]), to_float(x_t[test_idx]))
    return Dataset(
        xs[0], y_pool[train_idx], xs[1], y_pool[score_idx], xs[2], y_t[test_idx],
        train_idx, score_idx, test_idx, pool_name,
    )  # fmt: skip


def _blobs(shape, count: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """``size`` images, each a sum of ``count`` random colored Gaussian bumps, unit RMS."""
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros((size, c, h, w))
    for i in range(size):
        for _ in range(count):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            sigma = rng.uniform(1.5, 4.0)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
            out[i] += rng.standard_normal(c)[:, None, None] * bump
    rms = np.sqrt((out**2).mean(axis=(1, 2, 3), keepdims=True))
    return out / np.where(rms > 0, rms, 1.0)


def gen_synthetic(spec: DatasetSpec) -> Dataset:
    """Class-conditional Gaussian-blob images.

    Image = separability * (class prototype, shifted by up to ``jitter``
    pixels) + class-independent distractor blobs + N(0, noise^2) per
    pixel. Separability 0 makes classes indistinguishable.
    """
    if spec.class_count < 2:
        raise DatasetError("class_count must be >= 2")
    if spec.separability < 0 or spec.noise < 0 or (spec.separability == 0 and spec.noise == 0):
        raise DatasetError("degenerate synthetic spec (need separability >= 0, noise >= 0, not both 0)")
    rng = np.random.default_rng(spec.seed)
    protos = _blobs(spec.image_shape, spec.blobs, rng, spec.class_count)
    total = spec.train_size + spec.score_size + spec.test_size
    labels = rng.integers(0, spec.class_count, total)
    shifts = rng.integers(-spec.jitter, spec.jitter + 1, (total, 2))
    x = np.empty((total,) + spec.image_shape)
    for i in range(total):
        x[i] = np.roll(protos[labels[i]], tuple(shifts[i]), axis=(1, 2))
    x = spec.separability * x + spec.noise * rng.standard_normal(x.shape)
    if spec.distractors:
        x += _blobs(spec.image_shape, spec.distractors, rng, total)
    idx = np.arange(total)
    a, b = spec.train_size, spec.train_size + spec.score_size
    xs = _normalize(x[:a], x[a:b], x[b:])
    return Dataset(xs[0], labels[:a], xs[1], labels[a:b], xs[2], labels[b:], idx[:a], idx[a:b], idx[b:])


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.source == "cifar10":
        return load_cifar10(spec.path, spec)
    return gen_synthetic(spec)
