"""Accuracy, feature-space separability, PCA projection and CSV output."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

SEPARABILITY_CAP = 1e9
CSV_HEADER = ["round", "client", "loss", "acc", "mean_acc", "grad_norm",
              "contrastive_loss", "separability"]


@dataclass
class RoundMetrics:
    round: int
    loss: Dict[int, float]
    acc: Dict[int, float]
    grad_norm: Dict[int, float]
    contrastive_loss: float = float("nan")
    separability: float = float("nan")
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def mean_loss(self) -> float:
        return float(np.mean([self.loss[k] for k in sorted(self.loss)]))

    @property
    def mean_acc(self) -> float:
        return float(np.mean([self.acc[k] for k in sorted(self.acc)]))

    @property
    def mean_grad_norm(self) -> float:
        return float(np.mean([self.grad_norm[k] for k in sorted(self.grad_norm)]))


def accuracy(logits, labels) -> float:
    logits = np.atleast_2d(np.asarray(logits))
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        raise ValueError("accuracy of an empty batch")
    if logits.shape[0] != labels.size:
        raise ValueError(f"{logits.shape[0]} predictions for {labels.size} labels")
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def separability(features, labels) -> float:
    """Smallest gap between class means over the mean distance to own class mean.

    Classes with a single sample still contribute their mean but are left out
    of the within-class average. Returns ``SEPARABILITY_CAP`` when the
    within-class spread is exactly zero.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("separability needs at least two classes")
    means = {c: features[labels == c].mean(axis=0) for c in classes}
    between = min(np.linalg.norm(means[a] - means[b]) for a, b in itertools.combinations(classes, 2))
    within = []
    for c in classes:
        members = features[labels == c]
        if len(members) > 1:
            within.append(np.linalg.norm(members - means[c], axis=1))
    spread = float(np.mean(np.concatenate(within))) if within else 0.0
    if spread == 0.0:
        return SEPARABILITY_CAP
    return float(between / spread)


def pca_project(features, dims: int = 2, return_explained: bool = False):
    """Project onto the top principal components of the feature covariance.

    Each component is sign-fixed so its largest-magnitude loading is positive.
    With ``return_explained`` the fraction of total variance captured is also
    returned.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < dims:
        raise ValueError(f"need at least {dims} samples, got shape {X.shape}")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / max(X.shape[0] - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 0:
        raise ValueError("features have zero variance")
    order = np.argsort(evals)[::-1][:dims]
    comps = evecs[:, order]
    pivots = np.argmax(np.abs(comps), axis=0)
    comps = comps * np.sign(comps[pivots, np.arange(comps.shape[1])])
    coords = centered @ comps
    if return_explained:
        return coords, float(evals[order].sum() / evals.sum())
    return coords


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def write_metrics_csv(series: Sequence[RoundMetrics], path) -> None:
    """One row per (round, client) plus a ``client = -1`` aggregate row per round."""
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for rm in series:
                shared = [_fmt(rm.mean_acc)]
                tail = [_fmt(rm.contrastive_loss), _fmt(rm.separability)]
                for k in sorted(rm.loss):
                    w.writerow([rm.round, k, _fmt(rm.loss[k]), _fmt(rm.acc[k]), *shared,
                                _fmt(rm.grad_norm[k]), *tail])
                w.writerow([rm.round, -1, _fmt(rm.mean_loss), _fmt(rm.mean_acc), *shared,
                            _fmt(rm.mean_grad_norm), *tail])
    except OSError as exc:
        raise OSError(f"could not write metrics to {path}: {exc}") from exc


def read_metrics_csv(path) -> List[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        rec = {k: float(v) for k, v in row.items()}
        rec["round"] = int(rec["round"])
        rec["client"] = int(rec["client"])
        out.append(rec)
    return out


def write_features_csv(dumps: Iterable, path) -> None:
    """``dumps`` yields ``(client, features, labels)``; header ``client,label,f0..``."""
    path = Path(path)
    dumps = list(dumps)
    dim = dumps[0][1].shape[1] if dumps else 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client", "label"] + [f"f{j}" for j in range(dim)])
        for k, feats, labels in dumps:
            for f, y in zip(feats, labels):
                w.writerow([k, int(y)] + [_fmt(v) for v in f])
