"""Synthetic datasets, CSV I/O and the m-way q-shot non-IID partitioner."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

MAX_PARTITION_RETRIES = 1000


class ConfigError(ValueError):
    """An experiment or partition setting that cannot be honoured."""


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X{self.X.shape} and y{self.y.shape} do not align")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    m: int
    q: int
    seed: int = 0


def gen_blobs(num_classes: int, dim: int, n_per_class: int, spread: float = 1.0,
              seed: int = 0, radius: float = 4.0) -> Dataset:
    """Isotropic Gaussian classes around means placed on a sphere of ``radius``."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if dim < 1 or n_per_class < 1:
        raise ValueError(f"degenerate blob shape dim={dim} n_per_class={n_per_class}")
    if not spread > 0:
        raise ValueError("spread must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    means *= radius / np.linalg.norm(means, axis=1, keepdims=True)
    X = means.repeat(n_per_class, axis=0) + spread * rng.standard_normal((num_classes * n_per_class, dim))
    y = np.arange(num_classes).repeat(n_per_class)
    return Dataset(X, y, num_classes)


def _assign_classes(C: int, K: int, m: int, rng: np.random.Generator) -> List[np.ndarray]:
    # Deal a random permutation of the classes over client slots first so every
    # class has an owner, then fill remaining slots uniformly at random.
    perm = rng.permutation(C)
    owned = [[] for _ in range(K)]
    for j, c in enumerate(perm):
        owned[j % K].append(int(c))
    for k in range(K):
        rest = np.setdiff1d(np.arange(C), owned[k])
        need = m - len(owned[k])
        owned[k].extend(int(c) for c in rng.choice(rest, size=need, replace=False))
    return [np.sort(np.array(o)) for o in owned]


def partition_mwayqshot(ds: Dataset, spec: PartitionSpec) -> List[np.ndarray]:
    """Give each client ``m`` distinct classes and ``q`` samples of each.

    Returns one array of dataset row indices per client. Shards are disjoint
    and every class is owned by at least one client.
    """
    C, K, m, q = ds.num_classes, spec.num_clients, spec.m, spec.q
    if K < 1 or q < 1:
        raise ConfigError(f"need K >= 1 and q >= 1, got K={K} q={q}")
    if not 1 <= m <= C:
        raise ConfigError(f"m={m} must lie in [1, C={C}]")
    if K * m < C:
        raise ConfigError(f"K*m = {K * m} slots cannot cover C = {C} classes")
    available = np.bincount(ds.y, minlength=C)
    rng = np.random.default_rng(spec.seed)
    for _ in range(MAX_PARTITION_RETRIES):
        owned = _assign_classes(C, K, m, rng)
        demand = np.bincount(np.concatenate(owned), minlength=C) * q
        short = np.flatnonzero(demand > available)
        if short.size == 0:
            break
    else:
        c = int(short[0])
        raise ConfigError(
            f"class {c} needs {demand[c]} samples but only {available[c]} exist "
            f"(after {MAX_PARTITION_RETRIES} assignment draws)")
    pools = {c: list(rng.permutation(np.flatnonzero(ds.y == c))) for c in range(C)}
    shards = []
    for k in range(K):
        idx = []
        for c in owned[k]:
            idx.extend(pools[c][:q])
            del pools[c][:q]
        shards.append(np.array(idx, dtype=np.int64))
    return shards


def shard_classes(ds: Dataset, shard: np.ndarray) -> np.ndarray:
    return np.unique(ds.y[shard])


def load_csv(path) -> Dataset:
    """Read ``y,x0,x1,...`` rows; the class count is ``max(y) + 1``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    if not header or header[0].strip() != "y":
        raise ValueError(f"{path}:1: header must start with 'y', got {header[:1]}")
    width = len(header)
    if width < 2:
        raise ValueError(f"{path}:1: header has no feature columns")
    X, y = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise ValueError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        try:
            label = int(row[0])
            feats = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        if label < 0:
            raise ValueError(f"{path}:{lineno}: negative label {label}")
        y.append(label)
        X.append(feats)
    if not y:
        raise ValueError(f"{path}: no data rows")
    return Dataset(np.array(X), np.array(y), int(max(y)) + 1)


def save_csv(ds: Dataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y"] + [f"x{j}" for j in range(ds.dim)])
        for xi, yi in zip(ds.X, ds.y):
            w.writerow([int(yi)] + [repr(float(v)) for v in xi])
