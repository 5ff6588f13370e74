"""Datasets: Gaussian-mixture generation, affine distribution shift, CSV I/O, splits.

A :class:`Dataset` stores features and targets as arrays indexed by sample
id (``0..n-1``); ``split`` assigns each id to train (0), val (1) or test (2).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import PreconditionError
from .model import Sample

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}


class CSVFormatError(ValueError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        super().__init__(message)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    task: str = "classification"
    num_classes: int = 0
    split: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise PreconditionError(f"features {self.X.shape} and targets {self.y.shape} disagree")
        if self.scores is None:
            self.scores = np.ones(len(self.y))
        if not np.all(np.isfinite(self.X)) or not np.all(np.isfinite(self.y)):
            raise PreconditionError("dataset contains non-finite values")

    def __len__(self):
        return self.X.shape[0]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.int64)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(id=int(i), features=self.X[i], target=float(self.y[i]),
                      score=float(self.scores[i]))

    @property
    def samples(self) -> list:
        return [self.sample(i) for i in range(len(self))]

    def split_ids(self, name: str) -> np.ndarray:
        if self.split is None:
            raise PreconditionError("dataset has not been split")
        return np.flatnonzero(self.split == SPLIT_NAMES[name])


def _balanced_labels(n_samples, n_classes):
    counts = [n_samples // n_classes + (1 if c < n_samples % n_classes else 0)
              for c in range(n_classes)]
    return np.repeat(np.arange(n_classes), counts)


def generate_gaussian_mixture(seed, n_samples, n_features, n_classes, class_means,
                              class_cov_scale) -> Dataset:
    """Balanced spherical Gaussian classes around ``class_means``."""
    means = np.asarray(class_means, dtype=np.float64)
    if n_samples < 1 or n_features < 1 or n_classes < 2:
        raise PreconditionError("need n_samples >= 1, n_features >= 1, n_classes >= 2")
    if means.shape != (n_classes, n_features):
        raise PreconditionError(f"class_means must be {n_classes}x{n_features}, got {means.shape}")
    if class_cov_scale < 0:
        raise PreconditionError("class_cov_scale must be non-negative")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(_balanced_labels(n_samples, n_classes))
    noise = rng.standard_normal((n_samples, n_features))
    X = means[labels] + math.sqrt(class_cov_scale) * noise
    return Dataset(X=X, y=labels.astype(np.float64), task="classification",
                   num_classes=n_classes)


@dataclass
class ShiftSpec:
    mean_shift: Sequence[float]
    scale_shift: float = 1.0
    label_noise: float = 0.0
    class_prior_target: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.scale_shift <= 0:
            raise PreconditionError("scale_shift must be positive")
        if not 0.0 <= self.label_noise < 0.5:
            raise PreconditionError(f"label_noise must lie in [0, 0.5), got {self.label_noise}")
        if self.class_prior_target is not None:
            p = np.asarray(self.class_prior_target, dtype=np.float64)
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise PreconditionError("class_prior_target must be a probability vector")


def apply_shift(dataset: Dataset, shift: ShiftSpec, seed) -> Dataset:
    """Affine feature shift, symmetric label noise and optional prior re-weighting."""
    mean_shift = np.asarray(shift.mean_shift, dtype=np.float64)
    if mean_shift.shape != (dataset.n_features,):
        raise PreconditionError(f"mean_shift needs length {dataset.n_features}")
    rng = np.random.default_rng(seed)
    X = shift.scale_shift * dataset.X + mean_shift
    y = dataset.y.copy()
    if dataset.task == "classification" and shift.label_noise > 0:
        k = dataset.num_classes
        flip = rng.random(len(y)) < shift.label_noise
        # a uniformly chosen *different* class
        offset = rng.integers(1, k, size=len(y))
        y = np.where(flip, (y + offset) % k, y)
    if shift.class_prior_target is not None and dataset.task == "classification":
        target = np.asarray(shift.class_prior_target, dtype=np.float64)
        current = np.bincount(y.astype(np.int64), minlength=dataset.num_classes) / len(y)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(current > 0, target / current, 0.0)
        accept = ratio / ratio.max()
        keep = rng.random(len(y)) < accept[y.astype(np.int64)]
        X, y = X[keep], y[keep]
    return Dataset(X=X, y=y, task=dataset.task, num_classes=dataset.num_classes)


def split_dataset(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed=0) -> Dataset:
    """Seeded shuffle, then contiguous train/val/test blocks."""
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise PreconditionError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(dataset)
    n_val = int(round(fr[1] * n))
    n_test = int(round(fr[2] * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise PreconditionError(f"split sizes ({n_train}, {n_val}, {n_test}) leave a split empty")
    order = np.random.default_rng(seed).permutation(n)
    split = np.empty(n, dtype=np.int8)
    split[order[:n_train]] = TRAIN
    split[order[n_train:n_train + n_val]] = VAL
    split[order[n_train + n_val:]] = TEST
    return replace(dataset, split=split, scores=dataset.scores.copy())


# --- CSV -----------------------------------------------------------------------

@dataclass
class CSVSchema:
    label_column: str = "label"
    task: str = "classification"
    delimiter: str = ","
    labels: Optional[list] = field(default=None)


def write_csv(dataset: Dataset, path, label_column="label", delimiter=","):
    path = Path(path)
    header = [f"x{j}" for j in range(dataset.n_features)] + [label_column]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            row = [format(v, ".17g") for v in dataset.X[i]]
            t = dataset.y[i]
            row.append(str(int(t)) if dataset.task == "classification" else format(t, ".17g"))
            w.writerow(row)
    return path


def load_csv(path, schema: CSVSchema | None = None) -> Dataset:
    schema = schema or CSVSchema()
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError(f"{path}: missing header row") from None
        if schema.label_column not in header:
            raise CSVFormatError(f"{path}: label column {schema.label_column!r} not in header {header}")
        li = header.index(schema.label_column)
        label_map = ({str(v): k for k, v in enumerate(schema.labels)}
                     if schema.labels is not None else None)
        seen = []
        X, y = [], []
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise CSVFormatError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}", row=r)
            feats = []
            for c, cell in enumerate(row):
                if c == li:
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise CSVFormatError(
                        f"{path}: row {r}, column {header[c]!r}: non-numeric value {cell!r}",
                        row=r, column=header[c]) from None
                if not math.isfinite(v):
                    raise CSVFormatError(f"{path}: row {r}, column {header[c]!r}: non-finite value",
                                         row=r, column=header[c])
                feats.append(v)
            X.append(feats)
            y.append(_parse_label(row[li], schema, label_map, seen, path, r))
    if not X:
        raise CSVFormatError(f"{path}: no data rows")
    y = np.asarray(y, dtype=np.float64)
    if schema.task == "classification":
        k = len(schema.labels) if schema.labels is not None else int(y.max()) + 1
        return Dataset(X=np.asarray(X), y=y, task="classification", num_classes=max(k, 2))
    return Dataset(X=np.asarray(X), y=y, task="regression", num_classes=0)


def _parse_label(cell, schema, label_map, seen, path, r):
    col = schema.label_column
    if schema.task == "regression":
        try:
            v = float(cell)
        except ValueError:
            raise CSVFormatError(f"{path}: row {r}, column {col!r}: non-numeric target {cell!r}",
                                 row=r, column=col) from None
        if not math.isfinite(v):
            raise CSVFormatError(f"{path}: row {r}, column {col!r}: non-finite target", row=r, column=col)
        return v
    if label_map is not None:
        if cell not in label_map:
            raise CSVFormatError(f"{path}: row {r}: unknown label {cell!r}; seen labels {sorted(set(seen))}",
                                 row=r, column=col)
        seen.append(cell)
        return label_map[cell]
    try:
        v = int(cell)
    except ValueError:
        v = -1
    if v < 0:
        raise CSVFormatError(f"{path}: row {r}: unknown label {cell!r}; seen labels {sorted(set(seen))}",
                             row=r, column=col)
    seen.append(cell)
    return v
