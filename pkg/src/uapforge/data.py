"""Dataset ingestion, balanced splits and attacker-budget subsetting.

Images are kept in their native pixel units (0-255 for CIFAR-10 and the
synthetic sets) with the valid range carried as metadata; classifiers consume
values rescaled to [0, 1] via ``to_model_units``, and perturbation budgets are
expressed in those model units.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ConfigError, parse_config_file, Config
from .rng import make_rng

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 channel-major pixels
CIFAR_CLASSES = 10


class DataFormatError(ValueError):
    pass


class TruncatedFileError(DataFormatError):
    def __init__(self, path: str, byte_offset: int):
        self.byte_offset = byte_offset
        super().__init__(f"{path}: truncated record starting at byte offset {byte_offset}")


class CorruptRecordError(DataFormatError):
    def __init__(self, path: str, record: int, label: int):
        self.record = record
        super().__init__(f"{path}: record {record} has label byte {label} >= {CIFAR_CLASSES}")


@dataclass
class Dataset:
    """Labeled image stack (N, C, H, W) in native pixel units."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    input_range: tuple[float, float]
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] == 0:
            raise DataFormatError(f"images must be nonempty (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataFormatError(
                f"labels shape {self.labels.shape} != ({self.images.shape[0]},)"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")
        lo, hi = self.input_range
        if not (lo < hi):
            raise DataFormatError(f"bad input_range {self.input_range}")
        if self.images.min() < lo or self.images.max() > hi:
            raise DataFormatError(
                f"pixels outside input_range [{lo}, {hi}]: "
                f"min {self.images.min()}, max {self.images.max()}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def take(self, indices: np.ndarray, name: str | None = None) -> "Dataset":
        return replace(
            self,
            images=self.images[indices],
            labels=self.labels[indices],
            name=name or self.name,
        )


@dataclass(frozen=True)
class SplitSpec:
    train_per_class: int
    val_per_class: int
    seed: int = 0

    def __post_init__(self):
        if self.train_per_class < 0 or self.val_per_class < 0:
            raise ValueError("per-class split counts must be >= 0")


def to_model_units(x: np.ndarray, input_range: tuple[float, float]) -> np.ndarray:
    """Rescale native pixels to the classifier's [0, 1] input range."""
    lo, hi = input_range
    return ((x - lo) / (hi - lo)).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _smooth_field(rng: np.random.Generator, channels: int, size: int, grid: int) -> np.ndarray:
    """Unit-scale smooth random field: coarse noise bilinearly upsampled."""
    coarse = rng.standard_normal((channels, grid + 1, grid + 1))
    pos = np.linspace(0.0, grid, size)
    i0 = np.minimum(pos.astype(int), grid - 1)
    f = pos - i0
    rows = coarse[:, i0, :] * (1 - f)[None, :, None] + coarse[:, i0 + 1, :] * f[None, :, None]
    return rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]


def _balanced_counts(n: int, classes: int) -> np.ndarray:
    base, rem = divmod(n, classes)
    counts = np.full(classes, base, dtype=np.int64)
    counts[:rem] += 1
    return counts


def synthetic_dataset(
    classes: int = 3,
    size: int = 8,
    n: int = 300,
    seed: int = 7,
    channels: int = 3,
    background: float = 90.0,
    contrast: float = 60.0,
    noise: float = 12.0,
    jitter: int = 1,
    grid: int = 4,
    name: str = "synthetic",
) -> Dataset:
    """Class-conditional smooth-texture images in 0-255 units.

    Each class is a shared smooth background plus its own smooth structure;
    samples add translation jitter and pixel noise. ``contrast`` against
    ``noise`` sets how separable (and how attackable) the classes are.
    """
    if classes < 2 or n < classes:
        raise ValueError(f"need >= 2 classes and n >= classes, got {classes}, {n}")
    rng = make_rng(seed, "synthetic")
    bg = _smooth_field(rng, channels, size, grid) * background
    templates = [
        128.0 + bg + _smooth_field(rng, channels, size, grid) * contrast for _ in range(classes)
    ]
    counts = _balanced_counts(n, classes)
    images = np.empty((n, channels, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    row = 0
    for c in range(classes):
        for _ in range(int(counts[c])):
            img = templates[c]
            if jitter > 0:
                dy, dx = rng.integers(-jitter, jitter + 1, size=2)
                img = np.roll(img, (int(dy), int(dx)), axis=(1, 2))
            img = img + rng.normal(0.0, noise, size=img.shape)
            images[row] = np.clip(img, 0.0, 255.0)
            labels[row] = c
            row += 1
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], classes, (0.0, 255.0), name=name)


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------


def _parse_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    n, leftover = divmod(len(raw), CIFAR_RECORD_BYTES)
    if leftover:
        raise TruncatedFileError(path, n * CIFAR_RECORD_BYTES)
    if n == 0:
        raise DataFormatError(f"{path}: empty file")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
    if bad.size:
        i = int(bad[0])
        raise CorruptRecordError(path, i, int(labels[i]))
    images = arr[:, 1:].reshape(n, 3, 32, 32).astype(np.float32)
    return images, labels


def _cifar_batch_files(directory: str) -> list[str]:
    names = [f for f in os.listdir(directory) if re.fullmatch(r"data_batch_\d+\.bin", f)]
    if not names:
        raise DataFormatError(f"{directory}: no data_batch_*.bin files found")
    return [os.path.join(directory, f) for f in sorted(names)]


def load_dataset(path: str, format: str) -> Dataset:
    """Load one dataset; ``format`` is 'cifar10-binary' or 'synthetic'.

    cifar10-binary accepts a single .bin file or a directory whose
    data_batch_*.bin files are concatenated in sorted order. synthetic expects
    a key=value generator config file.
    """
    if format == "cifar10-binary":
        files = _cifar_batch_files(path) if os.path.isdir(path) else [path]
        parts = [_parse_cifar_file(f) for f in files]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        return Dataset(images, labels, CIFAR_CLASSES, (0.0, 255.0), name=os.path.basename(path))
    if format == "synthetic":
        cfg = parse_config_file(path)
        return synthetic_from_config(cfg)
    raise ConfigError(f"unknown dataset format {format!r}")


def synthetic_from_config(cfg: Config) -> Dataset:
    seed = cfg.get("dataset.seed")
    if seed < 0:
        seed = cfg.get("run.seed")
    return synthetic_dataset(
        classes=cfg.get("dataset.classes"),
        size=cfg.get("dataset.size"),
        n=cfg.get("dataset.n"),
        seed=seed,
        channels=cfg.get("dataset.channels"),
        background=cfg.get("dataset.background"),
        contrast=cfg.get("dataset.contrast"),
        noise=cfg.get("dataset.noise"),
        jitter=cfg.get("dataset.jitter"),
        grid=cfg.get("dataset.grid"),
    )


def load_cifar10(directory: str) -> tuple[Dataset, Dataset]:
    """Standard layout: data_batch_1..5.bin as train, test_batch.bin as val."""
    train = load_dataset(directory, "cifar10-binary")
    test_path = os.path.join(directory, "test_batch.bin")
    images, labels = _parse_cifar_file(test_path)
    val = Dataset(images, labels, CIFAR_CLASSES, (0.0, 255.0), name="cifar10-val")
    return replace(train, name="cifar10-train"), val


# ---------------------------------------------------------------------------
# splits and subsets
# ---------------------------------------------------------------------------


class SplitError(ValueError):
    pass


def split_balanced(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Disjoint class-balanced train/val split, deterministic in spec.seed."""
    rng = make_rng(spec.seed, "split")
    need = spec.train_per_class + spec.val_per_class
    train_idx, val_idx = [], []
    for c in range(ds.num_classes):
        pool = np.nonzero(ds.labels == c)[0]
        if pool.size < need:
            raise SplitError(
                f"class {c} has {pool.size} members, needs {need} "
                f"({spec.train_per_class} train + {spec.val_per_class} val)"
            )
        perm = pool[rng.permutation(pool.size)]
        train_idx.append(perm[: spec.train_per_class])
        val_idx.append(perm[spec.train_per_class : need])
    train = ds.take(np.concatenate(train_idx), name=f"{ds.name}-train")
    # val_per_class = 0 is a legal degenerate split; empty sets are None
    # because Dataset requires at least one row.
    val = ds.take(np.concatenate(val_idx), name=f"{ds.name}-val") if spec.val_per_class else None
    return train, val


def subset_fraction(train: Dataset, count_or_fraction, seed: int) -> Dataset:
    """Class-balanced subset (largest-remainder), deterministic given seed.

    An int is an absolute image count; a float in (0, 1] is a fraction of the
    dataset. The full-fraction case returns the same contents (order may
    differ).
    """
    n = len(train)
    if isinstance(count_or_fraction, bool):
        raise ValueError("count_or_fraction must be int or float")
    if isinstance(count_or_fraction, (int, np.integer)):
        m = int(count_or_fraction)
    else:
        f = float(count_or_fraction)
        if not (0.0 < f <= 1.0):
            raise ValueError(f"fraction must be in (0, 1], got {f}")
        m = int(round(f * n))
    if m <= 0:
        raise ValueError("cannot take an empty subset: a generator cannot train on nothing")
    if m > n:
        raise ValueError(f"requested {m} images from a {n}-image dataset")

    rng = make_rng(seed, "subset")
    pools = [np.nonzero(train.labels == c)[0] for c in range(train.num_classes)]
    sizes = np.array([p.size for p in pools], dtype=np.int64)
    # largest-remainder quota, capped at pool size with iterative redistribution
    quota = np.minimum(_largest_remainder(m, train.num_classes), sizes)
    short = m - int(quota.sum())
    while short > 0:
        room = sizes - quota
        order = np.argsort(-room, kind="stable")
        for c in order:
            if short == 0:
                break
            if room[c] > 0:
                quota[c] += 1
                short -= 1
    picked = []
    for c, pool in enumerate(pools):
        if quota[c] == 0:
            continue
        perm = pool[rng.permutation(pool.size)]
        picked.append(perm[: quota[c]])
    idx = np.concatenate(picked)
    idx = idx[rng.permutation(idx.size)]
    return train.take(idx, name=f"{train.name}-subset{m}")


def _largest_remainder(total: int, classes: int) -> np.ndarray:
    exact = total / classes
    floor = int(exact)
    counts = np.full(classes, floor, dtype=np.int64)
    counts[: total - floor * classes] += 1
    return counts
