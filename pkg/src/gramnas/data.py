"""Dataset ingestion, deterministic splitting, and synthetic generators."""
from __future__ import annotations

import csv as csv_module
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILE = "test_batch.bin"
_CIFAR_RECORD = 3073  # 1 label byte + 32*32*3 pixel bytes
_CIFAR_PER_FILE = 10000


class DatasetError(ValueError):
    """Raised for unreadable or inconsistent dataset sources."""


@dataclass
class Dataset:
    """Feature/label store plus disjoint train/validation/test index lists.

    `canonical_test_size` marks sources shipping their own held-out test
    rows (stored at the end of `features`); splitting uses them verbatim.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    image_shaped: bool
    train_indices: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))
    val_indices: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))
    test_indices: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))
    canonical_test_size: int = 0

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise DatasetError("features and labels disagree in length")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise DatasetError("label id outside num_classes")

    def __len__(self):
        return len(self.features)

    def subset(self, indices: np.ndarray) -> tuple:
        return self.features[indices], self.labels[indices]


def split(
    dataset: Dataset,
    train_n: int,
    val_n: int,
    test_n: Optional[int] = None,
    seed: int = 0,
) -> Dataset:
    """Assign train/validation/test index lists deterministically by seed.

    Sources with a canonical test set use it verbatim (test_n must then be
    omitted). Otherwise test rows come from the head of the seeded shuffle;
    training rows from the head of the remainder and validation rows from
    its tail.
    """
    total = len(dataset)
    rng = np.random.default_rng(seed)
    if dataset.canonical_test_size:
        if test_n is not None:
            raise DatasetError("source ships a canonical test set; do not request test_n")
        pool = np.arange(total - dataset.canonical_test_size)
        test = np.arange(total - dataset.canonical_test_size, total)
        remainder = rng.permutation(pool)
    else:
        test_n = int(test_n or 0)
        shuffled = rng.permutation(total)
        test = np.sort(shuffled[:test_n])
        remainder = shuffled[test_n:]
    if train_n + val_n > len(remainder):
        raise DatasetError(
            f"requested {train_n}+{val_n} instances from a pool of {len(remainder)}"
        )
    train = np.sort(remainder[:train_n])
    val = np.sort(remainder[len(remainder) - val_n :]) if val_n else np.array([], dtype=np.int64)
    return replace(
        dataset,
        train_indices=train.astype(np.int64),
        val_indices=val.astype(np.int64),
        test_indices=test.astype(np.int64),
    )


def load_cifar10_binary(directory) -> Dataset:
    """Read the six standard binary batch files: per record one label byte
    followed by 3072 pixel bytes (three 32x32 planes). Features come out as
    float32 in [0, 1], shaped N x 32 x 32 x 3, with the canonical test rows
    appended last."""
    directory = Path(directory)
    features = []
    labels = []
    for name in CIFAR10_TRAIN_FILES + [CIFAR10_TEST_FILE]:
        path = directory / name
        if not path.exists():
            raise DatasetError(f"missing CIFAR-10 batch file: {path}")
        raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        if raw.size != _CIFAR_RECORD * _CIFAR_PER_FILE:
            raise DatasetError(
                f"{path} holds {raw.size} bytes, expected {_CIFAR_RECORD * _CIFAR_PER_FILE}"
            )
        records = raw.reshape(_CIFAR_PER_FILE, _CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        planes = records[:, 1:].reshape(_CIFAR_PER_FILE, 3, 32, 32)
        features.append(planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0)
    return Dataset(
        features=np.concatenate(features),
        labels=np.concatenate(labels),
        num_classes=10,
        image_shaped=True,
        canonical_test_size=_CIFAR_PER_FILE,
    )


def load_csv(path, label_column: str) -> Dataset:
    """Numeric CSV with a header row; classes are the sorted distinct labels."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv_module.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path} is empty") from None
        if label_column not in header:
            raise DatasetError(
                f"label column {label_column!r} not found; available: {header}"
            )
        label_pos = header.index(label_column)
        rows = list(reader)
    if not rows:
        raise DatasetError(f"{path} has a header but no data rows")
    width = len(header)
    features = []
    raw_labels = []
    for row_no, row in enumerate(rows, start=2):
        if len(row) != width:
            raise DatasetError(f"{path} line {row_no}: expected {width} cells, got {len(row)}")
        try:
            values = [float(cell) for cell in row]
        except ValueError:
            raise DatasetError(f"{path} line {row_no}: non-numeric cell") from None
        raw_labels.append(values.pop(label_pos))
        features.append(values)
    distinct = sorted(set(raw_labels))
    label_ids = {value: i for i, value in enumerate(distinct)}
    return Dataset(
        features=np.asarray(features, dtype=np.float64),
        labels=np.asarray([label_ids[v] for v in raw_labels], dtype=np.int64),
        num_classes=len(distinct),
        image_shaped=False,
    )


def make_rings(n_per_class: int, noise_sigma: float, seed: int = 0) -> Dataset:
    """Two concentric noisy rings (radii 1 and 2) in the plane; class 0 is
    the inner ring. Deterministic given the seed."""
    if n_per_class < 1:
        raise DatasetError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    features = []
    labels = []
    for label, radius in enumerate((1.0, 2.0)):
        angles = rng.uniform(0.0, 2.0 * np.pi, size=n_per_class)
        radii = radius + rng.normal(0.0, noise_sigma, size=n_per_class)
        features.append(np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1))
        labels.append(np.full(n_per_class, label, dtype=np.int64))
    return Dataset(
        features=np.concatenate(features),
        labels=np.concatenate(labels),
        num_classes=2,
        image_shaped=False,
    )
