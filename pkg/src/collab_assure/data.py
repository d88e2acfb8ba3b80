"""Datasets: CSV ingestion, partitioning into D1/D2/holdout, synthetic data."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import rng as rngs

# default distance (in within-class std units) between the class-1 centre and
# each class-0 mode; gives a plaintext accuracy of ~0.93-0.97 on balanced data
DEFAULT_SEPARATION = 4.0
MINOR_MODE_WEIGHT = 0.2


class DataError(ValueError):
    pass


@dataclass
class LabeledDataset:
    name: str
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DataError("features and labels disagree on the number of rows")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def xy(self):
        return self.features, self.labels

    def subset(self, idx, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=int)
        return LabeledDataset(name or self.name, self.features[idx], self.labels[idx], self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


def standardize(features) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    return (x - mean) / std


def load_csv(path, label_column, n_classes: int, standardize_features: bool = True) -> LabeledDataset:
    """Read a header-first CSV; every non-label column must be numeric.

    Features are z-scored over the whole file.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column in header:
            li = header.index(label_column)
        elif str(label_column).isdigit() and int(label_column) < len(header):
            li = int(label_column)
        else:
            raise DataError(f"{path}: no column named {label_column!r}")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                values = [float(c) for j, c in enumerate(row) if j != li]
                raw = float(row[li])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric cell") from None
            if raw != int(raw):
                raise DataError(f"{path}:{lineno}: label {row[li]!r} is not an integer")
            if not 0 <= raw < n_classes:
                raise DataError(f"{path}:{lineno}: label {int(raw)} outside [0, {n_classes})")
            feats.append(values)
            labels.append(int(raw))
    if not labels:
        raise DataError(f"{path}: no data rows")
    x = np.array(feats)
    if standardize_features:
        x = standardize(x)
    return LabeledDataset(str(path), x, np.array(labels), n_classes)


def save_csv(dataset: LabeledDataset, path, label_column: str = "label"):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(dataset.features.shape[1])] + [label_column])
        for row, lab in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


@dataclass(frozen=True)
class SplitPlan:
    """How to carve D1, D2 and the holdout out of one dataset.

    Per-class counts, when given, override the matching fraction.
    ``d2_fraction=None`` gives D2 everything left over.
    """

    holdout_fraction: float = 0.30
    d1_fraction: float = 0.10
    d2_fraction: float | None = 0.60
    d1_counts: tuple | None = None
    holdout_counts: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        fracs = [self.holdout_fraction, self.d1_fraction]
        if self.d2_fraction is not None:
            fracs.append(self.d2_fraction)
        if any(not 0 < f < 1 for f in fracs):
            raise DataError("fractions must lie in (0, 1)")
        if sum(fracs) > 1 + 1e-9:
            raise DataError("fractions sum to more than 1")


def _take_counts(pool, labels, counts, rng, what):
    chosen = []
    for c, k in enumerate(counts):
        members = pool[labels[pool] == c]
        if k > members.size:
            raise DataError(f"{what} asks for {k} rows of class {c}, only {members.size} available")
        chosen.append(rng.permutation(members)[:k])
    picked = np.concatenate(chosen) if chosen else np.array([], dtype=int)
    return np.sort(picked)


def split(dataset: LabeledDataset, plan: SplitPlan):
    """Return ``(D1, D2, D_hold)`` as disjoint subsets."""
    n = len(dataset)
    rng = rngs.stream(plan.seed, rngs.SPLIT)
    pool = rng.permutation(n)
    labels = dataset.labels

    cum = 0.0  # fraction of rows handed out so far by fraction-based parts

    def take(fraction, counts, what):
        nonlocal pool, cum
        if counts is not None:
            if len(counts) != dataset.n_classes:
                raise DataError(f"{what} counts need one entry per class")
            picked = _take_counts(pool, labels, counts, rng, what)
            pool = pool[~np.isin(pool, picked)]
            return rng.permutation(picked)
        # rounding cumulative boundaries keeps the parts from overshooting n
        k = int(round((cum + fraction) * n)) - int(round(cum * n))
        cum += fraction
        if k > pool.size or k < 1:
            raise DataError(f"{what} needs {k} rows, {pool.size} available")
        picked, pool = pool[:k], pool[k:]
        return picked

    hold = take(plan.holdout_fraction, plan.holdout_counts, "holdout")
    d1 = take(plan.d1_fraction, plan.d1_counts, "D1")
    if plan.d2_fraction is None:
        d2, pool = pool, pool[:0]
    else:
        d2 = take(plan.d2_fraction, None, "D2")
    if d2.size == 0:
        raise DataError("D2 is empty")
    name = dataset.name
    return (dataset.subset(d1, f"{name}:D1"), dataset.subset(d2, f"{name}:D2"),
            dataset.subset(hold, f"{name}:hold"))


def gen_synthetic_binary(n_rows: int, d_features: int = 4, class_balance: float = 0.5, seed: int = 0,
                         separation: float = DEFAULT_SEPARATION) -> LabeledDataset:
    """Two-class Gaussian data; class 1 sits between two class-0 modes.

    Class 1 is ``N(0, I)``. Class 0 is ``N(-separation * u, I)`` with
    probability 0.8 and ``N(+separation * u, I)`` otherwise, for a fixed random
    unit direction ``u``. With few class-0 examples the minor mode is easy to
    miss, which is what makes a skewed D1 hurt.
    """
    if n_rows < 2 or not 0 < class_balance < 1:
        raise DataError("need n_rows >= 2 and class_balance in (0, 1)")
    rng = rngs.stream(seed, rngs.DATA)
    n1 = int(round(n_rows * class_balance))
    labels = np.r_[np.zeros(n_rows - n1, dtype=int), np.ones(n1, dtype=int)]
    labels = rng.permutation(labels)
    u = rng.normal(size=d_features)
    u /= np.linalg.norm(u)
    side = np.where(rng.random(n_rows) < MINOR_MODE_WEIGHT, 1.0, -1.0)
    shift = np.where(labels == 0, side * separation, 0.0)
    x = rng.normal(size=(n_rows, d_features)) + shift[:, None] * u[None, :]
    return LabeledDataset(f"synthetic-{n_rows}x{d_features}", x, labels, 2)


@dataclass(frozen=True)
class RandomLabeler:
    """Labels each point 1 with probability ``prob_one``, ignoring its features."""

    prob_one: float
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.prob_one <= 1:
            raise DataError("prob_one must lie in [0, 1]")

    def __call__(self, n: int) -> np.ndarray:
        rng = rngs.stream(self.seed, rngs.LABELS)
        return (rng.random(n) < self.prob_one).astype(int)


def relabel_random(dataset: LabeledDataset, labeler: RandomLabeler) -> LabeledDataset:
    if dataset.n_classes != 2:
        raise DataError("random relabelling is defined for binary tasks only")
    return LabeledDataset(f"{dataset.name}:random(p={labeler.prob_one})", dataset.features.copy(),
                          labeler(len(dataset)), 2)

