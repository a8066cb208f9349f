"""Synthetic few-shot datasets, CSV ingestion and seeded input corruption."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KINDS = ("two_moons", "spirals", "blobs", "csv")
TEST_PER_CLASS = 1000
VAL_PER_CLASS = 200


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    classes: int

    def __len__(self):
        return int(self.y.size)

    @property
    def dim(self) -> int:
        return int(self.X.shape[1])


class CsvFormatError(ValueError):
    """Malformed dataset CSV."""

    def __init__(self, path, line: int | None, message: str):
        self.line = line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")


class EmptyDatasetError(CsvFormatError):
    pass


class RaggedRowError(CsvFormatError):
    pass


class NonNumericError(CsvFormatError):
    pass


class LabelContiguityError(CsvFormatError):
    pass


def _moons(rng, n, noise):
    t0 = rng.uniform(0.0, np.pi, n)
    t1 = rng.uniform(0.0, np.pi, n)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    X = np.vstack([upper, lower])
    return X + noise * rng.standard_normal(X.shape), np.repeat([0, 1], n)


def _spirals(rng, n, noise):
    parts = []
    for c in (0, 1):
        t = rng.uniform(0.1, 1.0, n)
        angle = 3.0 * np.pi * t + c * np.pi
        parts.append(np.column_stack([t * np.cos(angle), t * np.sin(angle)]))
    X = np.vstack(parts)
    return X + noise * rng.standard_normal(X.shape), np.repeat([0, 1], n)


def _blobs(rng, n, noise, classes, dim, center_distance):
    if dim < classes:
        raise ValueError("blobs need dim >= classes so centers can sit on distinct axes")
    # centres on scaled unit axes are pairwise center_distance apart
    centres = np.eye(classes, dim) * (center_distance / np.sqrt(2.0))
    X = np.vstack([c + noise * rng.standard_normal((n, dim)) for c in centres])
    return X, np.repeat(np.arange(classes), n)


def sample_split(kind: str, n_per_class: int, noise: float, rng, classes=2, dim=2, center_distance=10.0):
    if kind == "two_moons":
        X, y = _moons(rng, n_per_class, noise)
        classes = 2
    elif kind == "spirals":
        X, y = _spirals(rng, n_per_class, noise)
        classes = 2
    elif kind == "blobs":
        X, y = _blobs(rng, n_per_class, noise, classes, dim, center_distance)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS[:-1]}")
    return Dataset(np.asarray(X, dtype=np.float64), y.astype(np.int64), int(classes))


def gen_dataset(kind: str, n_per_class: int, noise: float, seed: int, **kwargs):
    """Deterministic ``(train, test)`` pair; test has 1000 points per class.

    ``kwargs`` (``classes``, ``dim``, ``center_distance``) configure blobs.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    train = sample_split(kind, n_per_class, noise, np.random.default_rng([seed, 0]), **kwargs)
    test = sample_split(kind, TEST_PER_CLASS, noise, np.random.default_rng([seed, 1]), **kwargs)
    return train, test


def gen_validation(kind: str, noise: float, seed: int, n_per_class: int = VAL_PER_CLASS, **kwargs) -> Dataset:
    """Held-out split for early stopping, disjoint stream from train and test."""
    return sample_split(kind, n_per_class, noise, np.random.default_rng([seed, 2]), **kwargs)


def load_csv(path) -> Dataset:
    """Read ``f0,...,fd,label`` rows; labels must be contiguous integers from 0."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EmptyDatasetError(path, None, "file is empty")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[-1] != "label":
        raise CsvFormatError(path, 1, "header must be f0,...,fd,label")
    width = len(header)
    feats, labels, linenos = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise RaggedRowError(path, lineno, f"expected {width} columns, got {len(row)}")
        try:
            values = [float(c) for c in row[:-1]]
            label_f = float(row[-1])
        except ValueError:
            raise NonNumericError(path, lineno, "non-numeric cell") from None
        if not label_f.is_integer():
            raise NonNumericError(path, lineno, f"label {row[-1]!r} is not an integer")
        feats.append(values)
        labels.append(int(label_f))
        linenos.append(lineno)
    if not feats:
        raise EmptyDatasetError(path, None, "no data rows")
    y = np.asarray(labels, dtype=np.int64)
    present = np.unique(y)
    if present[0] < 0:
        bad = int(np.flatnonzero(y < 0)[0])
        raise LabelContiguityError(path, linenos[bad], "negative label")
    missing = sorted(set(range(int(present[-1]) + 1)) - set(present.tolist()))
    if missing:
        bad = int(np.flatnonzero(y > missing[0])[0])
        raise LabelContiguityError(path, linenos[bad], f"labels are not contiguous from 0 (missing {missing})")
    return Dataset(np.asarray(feats, dtype=np.float64), y, int(present.size))


def write_csv(dataset: Dataset, path) -> None:
    path = Path(path)
    d = dataset.dim
    lines = [",".join([f"f{i}" for i in range(d)] + ["label"])]
    for x, label in zip(dataset.X, dataset.y):
        lines.append(",".join(f"{v:.17g}" for v in x) + f",{int(label)}")
    path.write_text("\n".join(lines) + "\n")


def corrupt(X, severity: int, seed) -> np.ndarray:
    """Additive Gaussian noise with per-feature std ``0.1 * severity * std(X[:, j])``."""
    if severity not in (1, 2, 3, 4, 5):
        raise ValueError(f"severity must be an integer in 1..5, got {severity!r}")
    X = np.asarray(X, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    scale = 0.1 * severity * X.std(axis=0)
    return X + rng.standard_normal(X.shape) * scale
