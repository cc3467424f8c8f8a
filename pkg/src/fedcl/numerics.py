"""Small dense-network engine: affine layers, ReLU, softmax cross-entropy, SGD.

Tensors are plain ``numpy.ndarray`` objects in float64. Backprop is written by
hand for the MLP shape used everywhere in this package (affine layers with a
ReLU between consecutive layers, none after the last one).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

Params = Dict[str, np.ndarray]


class ShapeError(ValueError):
    """Raised when array shapes do not line up."""


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass
class AffineLayer:
    """Fully-connected layer computing ``W @ x + b``; ``W`` has shape (out, in)."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(
                f"inconsistent layer shapes W{self.W.shape} b{self.b.shape}")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "AffineLayer":
        """Glorot-uniform weights, zero bias."""
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        W = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        return cls(W, np.zeros(out_dim))

    def copy(self) -> "AffineLayer":
        return AffineLayer(self.W.copy(), self.b.copy())


def affine_forward(x: np.ndarray, layer: AffineLayer) -> np.ndarray:
    """Apply ``W x + b`` to a vector ``(in,)`` or to a batch of rows ``(n, in)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (layer.in_dim,) or x.ndim > 2:
        raise ShapeError(
            f"input shape {x.shape} does not match layer W{layer.W.shape}")
    return x @ layer.W.T + layer.b


def affine_backward(x: np.ndarray, layer: AffineLayer,
                    grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(grad_x, grad_W, grad_b)``; batched inputs sum over rows."""
    if x.ndim == 1:
        return layer.W.T @ grad_out, np.outer(grad_out, x), grad_out.copy()
    return grad_out @ layer.W, grad_out.T @ x, grad_out.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is taken as 0
    return grad_out * (x > 0)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, label) -> Tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against an integer label.

    Accepts one logit vector with a scalar label, or a batch ``(n, C)`` with
    ``n`` labels. For a batch the loss is the mean over rows and the gradient
    is scaled accordingly.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.atleast_1d(np.asarray(label))
    batch = np.atleast_2d(logits)
    C = batch.shape[1]
    if labels.shape[0] != batch.shape[0]:
        raise ShapeError(f"{batch.shape[0]} logit rows but {labels.shape[0]} labels")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"label out of range [0, {C}): {labels}")
    labels = labels.astype(np.int64)
    logp = log_softmax(batch)
    rows = np.arange(batch.shape[0])
    n = batch.shape[0]
    loss = -logp[rows, labels].sum() / n
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    if logits.ndim == 1:
        grad = grad[0]
    return float(loss), grad


def sgd_step(params: Params, grads: Mapping[str, np.ndarray], lr: float) -> Params:
    """In-place ``p -= lr * g`` for every entry of ``params``; returns ``params``.

    Every parameter must have a gradient of identical shape. Arrays are
    updated in place so references held elsewhere see the new values.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if set(params) != set(grads):
        raise ShapeError(f"gradient keys {sorted(grads)} do not match parameters {sorted(params)}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
    for name, p in params.items():
        p -= lr * grads[name]
    return params


def grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


@dataclass
class MLP:
    """Stack of affine layers with ReLU between consecutive layers.

    ``MLP.build([d])`` has no layers and acts as the identity on ``d``-vectors.
    The last forward pass is cached so :meth:`backward` can run afterwards.
    """

    layers: List[AffineLayer]
    dim: Optional[int] = None
    _cache: Optional[list] = field(default=None, repr=False, compare=False)

    @classmethod
    def build(cls, sizes: Sequence[int], rng: Optional[np.random.Generator] = None) -> "MLP":
        sizes = [int(s) for s in sizes]
        if not sizes or any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if len(sizes) > 1 and rng is None:
            raise ValueError("an rng is required to initialise weights")
        layers = [AffineLayer.init(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        return cls(layers, dim=sizes[0])

    def __post_init__(self):
        if self.layers:
            self.dim = self.layers[0].in_dim
        elif self.dim is None:
            raise ValueError("an empty MLP needs an explicit dim")

    @property
    def in_dim(self) -> int:
        return self.dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim if self.layers else self.dim

    @property
    def sizes(self) -> List[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def parameters(self) -> Params:
        params = {}
        for i, layer in enumerate(self.layers):
            params[f"W{i}"] = layer.W
            params[f"b{i}"] = layer.b
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def copy(self) -> "MLP":
        return MLP([layer.copy() for layer in self.layers], dim=self.dim)

    def load(self, params: Mapping[str, np.ndarray]) -> None:
        """Copy values from ``params`` into this network's arrays."""
        own = self.parameters()
        if set(own) != set(params):
            raise ShapeError("parameter names do not match")
        for name, p in own.items():
            if params[name].shape != p.shape:
                raise ShapeError(f"{name}: {params[name].shape} != {p.shape}")
            p[...] = params[name]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"input shape {x.shape} does not match network input {self.in_dim}")
        cache = []
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            pre = affine_forward(h, layer)
            cache.append((h, pre))
            h = relu(pre) if i < last else pre
        self._cache = cache
        return h

    __call__ = forward

    def backward(self, grad_out: np.ndarray) -> Tuple[Params, np.ndarray]:
        """Backprop through the cached forward pass; returns ``(param_grads, input_grad)``."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        grads: Params = {}
        g = np.asarray(grad_out, dtype=np.float64)
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            h, pre = self._cache[i]
            if i < last:
                g = relu_backward(pre, g)
            g, grads[f"W{i}"], grads[f"b{i}"] = affine_backward(h, self.layers[i], g)
        return grads, g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a| + |n|, floor)``.

    The floor keeps round-off on near-zero gradients from reading as a large
    relative error.
    """
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def numeric_gradient(loss_fn: Callable[[], float], params: Params, eps: float) -> Params:
    """Central finite differences of ``loss_fn`` with respect to every entry of ``params``."""
    numeric = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn()
            flat[j] = orig - eps
            down = loss_fn()
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}[{j}]")
            gflat[j] = (up - down) / (2 * eps)
        numeric[name] = g
    return numeric


def grad_check(network, x, label, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``network`` must expose ``parameters()`` (a dict of arrays that are mutated
    in place during probing) and ``loss_and_grad(x, label) -> (loss, grads)``.
    A network without parameters trivially scores 0.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = network.parameters()
    loss, analytic = network.loss_and_grad(x, label)
    if not np.isfinite(loss):
        raise FloatingPointError("loss is not finite")
    if not params:
        return 0.0
    numeric = numeric_gradient(lambda: network.loss_and_grad(x, label)[0], params, eps)
    return max(float(rel_error(analytic[k], numeric[k]).max()) for k in params)


class Classifier:
    """An MLP scored with softmax cross-entropy, in the shape ``grad_check`` expects."""

    def __init__(self, mlp: MLP):
        self.mlp = mlp

    def parameters(self) -> Params:
        return self.mlp.parameters()

    def loss_and_grad(self, x, label):
        loss, g = softmax_cross_entropy(self.mlp.forward(x), label)
        grads, _ = self.mlp.backward(g)
        return loss, grads
