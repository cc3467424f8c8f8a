"""Client encoders, server decoders and the semantic centroid generator (SCG)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .channel import ChannelConfig, transmit_rows
from .numerics import MLP, Params


@dataclass(frozen=True)
class EncoderSpec:
    """Client encoder architecture. ``hidden_dims`` may differ between clients."""

    input_dim: int
    hidden_dims: Tuple[int, ...] = (64,)
    feature_dim: int = 64

    @property
    def sizes(self):
        return [self.input_dim, *self.hidden_dims, self.feature_dim]

    def build(self, rng: np.random.Generator) -> MLP:
        return MLP.build(self.sizes, rng)


@dataclass(frozen=True)
class DecoderSpec:
    feature_dim: int = 64
    hidden_dims: Tuple[int, ...] = (64,)
    num_classes: int = 10

    @property
    def sizes(self):
        return [self.feature_dim, *self.hidden_dims, self.num_classes]

    def build(self, rng: np.random.Generator) -> MLP:
        return MLP.build(self.sizes, rng)


def encoder_forward(x, encoder: MLP) -> np.ndarray:
    return encoder.forward(x)


def decoder_forward(features, decoder: MLP) -> np.ndarray:
    return decoder.forward(features)


def split_backward(logit_grad: np.ndarray, decoder: MLP, encoder: MLP,
                   downlink: ChannelConfig, rng: Optional[np.random.Generator],
                   boundary_extra: Optional[np.ndarray] = None):
    """Backward pass across the client/server split.

    Backprop through the decoder gives its parameter gradients and the
    gradient at the received features. ``boundary_extra`` (the centroid
    regulariser's gradient) is added there, the sum crosses the downlink
    channel, and the client backprops the corrupted copy through its encoder.
    The uplink channel is treated as the identity in this pass.

    Returns ``(decoder_grads, boundary_grad, noised_boundary_grad, encoder_grads)``.
    """
    if decoder._cache is None or encoder._cache is None:
        raise RuntimeError("split_backward needs cached forward passes on both networks")
    dec_grads, boundary = decoder.backward(logit_grad)
    if boundary_extra is not None:
        boundary = boundary + boundary_extra
    if downlink.noiseless:
        noised = boundary
    else:
        noised = transmit_rows(np.atleast_2d(boundary), downlink, rng).reshape(boundary.shape)
    enc_grads, _ = encoder.backward(noised)
    return dec_grads, boundary, noised, enc_grads


@dataclass
class ScgState:
    """Centroid generator: fixed seeds ``z_c`` fed through a trainable 2-layer MLP."""

    seeds: np.ndarray
    net: MLP

    @classmethod
    def init(cls, num_classes: int, feature_dim: int, rng: np.random.Generator,
             hidden_dim: Optional[int] = None) -> "ScgState":
        hidden_dim = feature_dim if hidden_dim is None else hidden_dim
        seeds = rng.standard_normal((num_classes, feature_dim))
        net = MLP.build([feature_dim, hidden_dim, feature_dim], rng)
        # a seed that switches off every hidden unit would give a constant centroid
        first = net.layers[0]
        for c in range(num_classes):
            while not np.any(first.W @ seeds[c] + first.b > 0):
                seeds[c] = rng.standard_normal(feature_dim)
        seeds.setflags(write=False)
        return cls(seeds, net)

    @property
    def num_classes(self) -> int:
        return self.seeds.shape[0]

    def parameters(self) -> Params:
        return self.net.parameters()

    def copy(self) -> "ScgState":
        return ScgState(self.seeds, self.net.copy())


def scg_forward(scg: ScgState) -> np.ndarray:
    """Global centroids, one row per class: ``affine2(relu(affine1(z_c)))``."""
    return scg.net.forward(scg.seeds)
