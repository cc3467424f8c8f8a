"""Finite-difference gradient suites and channel calibration checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .channel import ChannelConfig, measure_snr
from .models import ScgState, scg_forward, split_backward
from .numerics import (
    MLP, AffineLayer, Classifier, Params, ShapeError, affine_backward, affine_forward, grad_check,
    relu, relu_backward, softmax_cross_entropy,
)
from .protocol import contrastive_loss, project_centroids, regularized_loss, _project_backward

GRAD_TOLERANCE = 1e-4
SNR_TOLERANCE_DB = 0.2


class SplitNetwork:
    """Encoder, noiseless link and decoder scored as one network.

    With ``centroids`` set the centroid regulariser is added to the
    cross-entropy, exactly as clients see it during training.
    """

    def __init__(self, encoder: MLP, decoder: MLP, centroids: Optional[np.ndarray] = None,
                 lam: float = 0.0):
        if encoder.out_dim != decoder.in_dim:
            raise ShapeError(f"encoder emits {encoder.out_dim} features, decoder takes {decoder.in_dim}")
        self.encoder = encoder
        self.decoder = decoder
        self.centroids = centroids
        self.lam = lam

    def parameters(self) -> Params:
        params = {f"enc.{k}": v for k, v in self.encoder.parameters().items()}
        params.update({f"dec.{k}": v for k, v in self.decoder.parameters().items()})
        return params

    def loss_and_grad(self, x, labels):
        labels = np.atleast_1d(labels)
        feats = np.atleast_2d(self.encoder.forward(np.atleast_2d(x)))
        logits = self.decoder.forward(feats)
        if self.centroids is None:
            loss, g = softmax_cross_entropy(logits, labels)
            extra = None
        else:
            loss, g, extra = regularized_loss(logits, labels, feats, self.centroids, self.lam)
        dec, _, _, enc = split_backward(g, self.decoder, self.encoder,
                                        ChannelConfig(snr_db=np.inf), None, extra)
        grads = {f"enc.{k}": v for k, v in enc.items()}
        grads.update({f"dec.{k}": v for k, v in dec.items()})
        return loss, grads


class ScgObjective:
    """Contrastive objective as a function of the generator parameters."""

    def __init__(self, scg: ScgState, local_sets, radius: Optional[float] = None):
        self.scg = scg
        self.local_sets = local_sets
        self.radius = radius

    def parameters(self) -> Params:
        return self.scg.parameters()

    def loss_and_grad(self, x=None, label=None):
        raw = scg_forward(self.scg)
        F = project_centroids(raw, self.radius)
        loss, dF = contrastive_loss(self.local_sets, F, return_grad=True)
        grads, _ = self.scg.net.backward(_project_backward(raw, self.radius, dF))
        return loss, grads


class _AffineReluProbe:
    """One affine layer followed by ReLU, scored against a fixed random projection."""

    def __init__(self, rng):
        self.layer = AffineLayer(rng.normal(size=(5, 4)), rng.normal(size=5))
        self.weights = rng.normal(size=5)

    def parameters(self) -> Params:
        return {"W": self.layer.W, "b": self.layer.b}

    def loss_and_grad(self, x, label=None):
        pre = affine_forward(x, self.layer)
        loss = float(np.sum(relu(pre) @ self.weights))
        up = np.broadcast_to(self.weights, pre.shape)
        _, gW, gb = affine_backward(x, self.layer, relu_backward(pre, up))
        return loss, {"W": gW, "b": gb}


class _LogitsProbe:
    """Cross-entropy with the logits themselves as the parameters."""

    def __init__(self, rng, classes=6):
        self.logits = rng.normal(size=(3, classes))

    def parameters(self) -> Params:
        return {"logits": self.logits}

    def loss_and_grad(self, x, label):
        loss, g = softmax_cross_entropy(self.logits, label)
        return loss, {"logits": g}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < GRAD_TOLERANCE


def _local_sets(rng, clients, classes, dim):
    sets = []
    for _ in range(clients):
        owned = rng.choice(classes, size=rng.integers(1, classes + 1), replace=False)
        sets.append({int(c): rng.normal(size=dim) for c in sorted(owned)})
    return sets


def gradcheck_suite(seed: int = 0, eps: float = 1e-6) -> List[CheckResult]:
    """Every differentiable piece used in training, checked by central differences."""
    rng = np.random.default_rng(seed)
    cases: List[tuple] = []

    cases.append(("affine+relu layer", _AffineReluProbe(rng), rng.normal(size=(3, 4)), None))
    cases.append(("softmax cross-entropy", _LogitsProbe(rng), None, np.array([0, 5, 2])))
    cases.append(("mlp classifier", Classifier(MLP.build([6, 8, 7, 4], rng)),
                  rng.normal(size=(5, 6)), rng.integers(0, 4, size=5)))

    for hidden in [(), (9,), (7, 5)]:
        enc = MLP.build([6, *hidden, 8], rng)
        dec = MLP.build([8, 10, 4], rng)
        cases.append((f"split network, encoder hidden {list(hidden)}", SplitNetwork(enc, dec),
                      rng.normal(size=(5, 6)), rng.integers(0, 4, size=5)))

    enc, dec = MLP.build([6, 9, 8], rng), MLP.build([8, 10, 4], rng)
    cases.append(("split network + centroid regulariser",
                  SplitNetwork(enc, dec, centroids=rng.normal(size=(4, 8)), lam=0.5),
                  rng.normal(size=(5, 6)), rng.integers(0, 4, size=5)))

    for radius in (None, 3.0):
        scg = ScgState.init(4, 6, rng)
        label = "scg contrastive" + (f", centroid radius {radius}" if radius else "")
        cases.append((label, ScgObjective(scg, _local_sets(rng, 3, 4, 6), radius), None, None))

    return [CheckResult(name, grad_check(net, x, y, eps=eps)) for name, net, x, y in cases]


@dataclass
class SnrResult:
    configured_db: float
    measured_db: float

    @property
    def passed(self) -> bool:
        if self.configured_db == np.inf:
            return self.measured_db == np.inf
        return abs(self.measured_db - self.configured_db) <= SNR_TOLERANCE_DB


def channel_check(snr_db: float, n_symbols: int = 100_000, seed: int = 0) -> SnrResult:
    return SnrResult(snr_db, measure_snr(snr_db, n_symbols, seed))
