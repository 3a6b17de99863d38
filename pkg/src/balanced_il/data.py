"""Datasets, synthetic tasks and class-incremental schedules."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

DATASET_MAGIC = b"BILDATA\x00"
DATASET_VERSION = 1


@dataclass
class LabeledDataset:
    """Feature matrix with integer labels.

    ``ids`` are row indices into whatever dataset this one was cut from; for a
    freshly loaded dataset they are ``0..n-1``.
    """

    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or len(self.samples) != len(self.labels):
            raise ValueError("samples must be [n, d] with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        self.ids = (np.arange(len(self.labels)) if self.ids is None
                    else np.asarray(self.ids, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def class_indices(self) -> dict[int, np.ndarray]:
        """Row indices per present class, in row order."""
        return {int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)}

    def class_counts(self, num_classes: int | None = None) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes or self.num_classes)

    def subset(self, rows) -> "LabeledDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledDataset(self.samples[rows], self.labels[rows], self.num_classes, self.ids[rows])

    def with_num_classes(self, num_classes: int) -> "LabeledDataset":
        return LabeledDataset(self.samples, self.labels, num_classes, self.ids)


def concat(parts: list[LabeledDataset], num_classes: int) -> LabeledDataset:
    parts = [p for p in parts if len(p)]
    if not parts:
        raise ValueError("nothing to concatenate")
    return LabeledDataset(
        np.concatenate([p.samples for p in parts]),
        np.concatenate([p.labels for p in parts]),
        num_classes,
        np.concatenate([p.ids for p in parts]),
    )


# ----------------------------------------------------------------------------
# Schedules
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class IncrementalSchedule:
    """Class order plus the contiguous id range introduced at each step.

    Remapped class ``i`` is original class ``class_order[i]``.
    """

    class_order: tuple
    base_count: int
    cumulative: tuple  # N_0, N_1, ..., N_T

    @property
    def num_steps(self) -> int:
        """Number of incremental steps (the base step excluded)."""
        return len(self.cumulative) - 1

    @property
    def num_classes(self) -> int:
        return self.cumulative[-1]

    @property
    def groups(self) -> list[range]:
        bounds = (0,) + tuple(self.cumulative)
        return [range(bounds[t], bounds[t + 1]) for t in range(len(self.cumulative))]

    def classes_at(self, t: int) -> int:
        return self.cumulative[t]

    def previous_classes(self, t: int) -> int:
        return 0 if t == 0 else self.cumulative[t - 1]

    def remap(self, labels) -> np.ndarray:
        inverse = np.empty(len(self.class_order), dtype=np.int64)
        inverse[np.asarray(self.class_order)] = np.arange(len(self.class_order))
        return inverse[np.asarray(labels, dtype=np.int64)]


def valid_step_counts(num_classes: int, base_count: int) -> list[int]:
    rest = num_classes - base_count
    if rest == 0:
        return [0]
    return [k for k in range(1, rest + 1) if rest % k == 0]


def build_schedule(num_classes: int, base_count: int, num_inc_steps: int,
                   seed: int = 1993) -> IncrementalSchedule:
    """Seeded class permutation; ``base_count`` classes first, the rest split evenly."""
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    if not 1 <= base_count <= num_classes:
        raise ValueError(f"base_count must lie in [1, {num_classes}], got {base_count}")
    if num_inc_steps < 0:
        raise ValueError("num_inc_steps must be >= 0")
    rest = num_classes - base_count
    valid = valid_step_counts(num_classes, base_count)
    if num_inc_steps not in valid:
        raise ValueError(
            f"{rest} remaining classes cannot be split into {num_inc_steps} equal steps; "
            f"valid step counts: {valid}"
        )
    order = np.random.default_rng(seed).permutation(num_classes)
    per_step = rest // num_inc_steps if num_inc_steps else 0
    cumulative = tuple(base_count + per_step * t for t in range(num_inc_steps + 1))
    return IncrementalSchedule(tuple(int(c) for c in order), base_count, cumulative)


def remap_dataset(dataset: LabeledDataset, schedule: IncrementalSchedule) -> LabeledDataset:
    """Relabel so class ids follow the schedule's order."""
    return LabeledDataset(dataset.samples, schedule.remap(dataset.labels),
                          schedule.num_classes, dataset.ids)


def step_view(dataset: LabeledDataset, schedule: IncrementalSchedule, t: int) -> LabeledDataset:
    """Rows of a remapped dataset whose class is introduced at step ``t``."""
    if not 0 <= t <= schedule.num_steps:
        raise ValueError(f"step {t} outside [0, {schedule.num_steps}]")
    group = schedule.groups[t]
    rows = np.flatnonzero((dataset.labels >= group.start) & (dataset.labels < group.stop))
    return dataset.subset(rows)


def cumulative_view(dataset: LabeledDataset, schedule: IncrementalSchedule, t: int) -> LabeledDataset:
    """Rows of every class seen up to and including step ``t``."""
    n = schedule.classes_at(t)
    return dataset.subset(np.flatnonzero(dataset.labels < n))


# ----------------------------------------------------------------------------
# Synthetic tasks
# ----------------------------------------------------------------------------


def synthesize_gaussian_task(num_classes: int, dim: int, n_train_per_class: int,
                             n_test_per_class: int, spread: float, seed: int = 0,
                             radius: float = 1.0) -> tuple[LabeledDataset, LabeledDataset]:
    """Isotropic Gaussian blobs whose means sit on a sphere of ``radius``."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if min(num_classes, n_train_per_class, n_test_per_class) < 1:
        raise ValueError("class and sample counts must be positive")
    if spread < 0:
        raise ValueError("spread must be >= 0")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    means *= radius / np.linalg.norm(means, axis=1, keepdims=True)

    def draw(per_class):
        labels = np.repeat(np.arange(num_classes), per_class)
        noise = rng.standard_normal((len(labels), dim))
        return LabeledDataset(means[labels] + spread * noise, labels, num_classes)

    train = draw(n_train_per_class)
    test = draw(n_test_per_class)
    return train, test


# ----------------------------------------------------------------------------
# File formats
# ----------------------------------------------------------------------------


def save_dataset(dataset: LabeledDataset, path, format: str = "csv") -> None:
    path = Path(path)
    if format == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for label, row in zip(dataset.labels, dataset.samples):
                writer.writerow([int(label)] + [repr(float(v)) for v in row])
    elif format == "binary":
        n, d = dataset.samples.shape
        with open(path, "wb") as fh:
            fh.write(DATASET_MAGIC)
            fh.write(struct.pack("<IQII", DATASET_VERSION, n, d, dataset.num_classes))
            fh.write(dataset.labels.astype("<i4").tobytes())
            fh.write(np.ascontiguousarray(dataset.samples, dtype="<f8").tobytes())
    else:
        raise ValueError(f"unknown dataset format {format!r}")


def load_dataset(path, format: str = "csv") -> LabeledDataset:
    """Read ``label,f1,...,fd`` CSV rows or the binary layout.

    Binary layout (little-endian): magic(8) | version u32 | n u64 | d u32 |
    num_classes u32 | labels i32[n] | features f64[n*d] row-major.
    """
    path = Path(path)
    if format == "csv":
        return _load_csv(path)
    if format == "binary":
        return _load_binary(path)
    raise ValueError(f"unknown dataset format {format!r}")


def _load_csv(path: Path) -> LabeledDataset:
    labels, rows = [], []
    dim = None
    with open(path, newline="") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if not record or all(not f.strip() for f in record):
                continue
            try:
                label = int(record[0])
                feats = [float(v) for v in record[1:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: malformed row ({exc})") from None
            if label < 0:
                raise FormatError(f"{path}:{lineno}: negative label {label}")
            if dim is None:
                dim = len(feats)
                if dim == 0:
                    raise FormatError(f"{path}:{lineno}: row has no features")
            elif len(feats) != dim:
                raise FormatError(
                    f"{path}:{lineno}: expected {dim} features, found {len(feats)}")
            labels.append(label)
            rows.append(feats)
    if not rows:
        raise FormatError(f"{path}: empty dataset")
    labels = np.asarray(labels, dtype=np.int64)
    return LabeledDataset(np.asarray(rows), labels, int(labels.max()) + 1)


def _load_binary(path: Path) -> LabeledDataset:
    data = path.read_bytes()
    if len(data) < 28 or data[:8] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a binary dataset file")
    version, n, d, num_classes = struct.unpack_from("<IQII", data, 8)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = 28 + 4 * n + 8 * n * d
    if len(data) != expected:
        raise FormatError(f"{path}: size {len(data)} does not match header ({expected})")
    if n == 0:
        raise FormatError(f"{path}: empty dataset")
    labels = np.frombuffer(data, "<i4", n, 28).astype(np.int64)
    samples = np.frombuffer(data, "<f8", n * d, 28 + 4 * n).reshape(n, d).copy()
    if labels.min() < 0 or labels.max() >= num_classes:
        raise FormatError(f"{path}: label outside [0, {num_classes})")
    return LabeledDataset(samples, labels, num_classes)
