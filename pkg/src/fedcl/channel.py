"""Simulated wireless link between clients and the base station.

Real-valued tensors are packed pairwise into complex symbols, pass through
``y = h*s + n`` with ``n ~ CN(0, delta^2)`` and are unpacked again. The noise
variance is set from the *measured* power of each frame, so the configured
SNR stays meaningful while feature magnitudes drift during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np

NOISELESS = math.inf


@dataclass(frozen=True)
class ChannelConfig:
    """Link parameters. ``snr_db = inf`` switches the channel off entirely."""

    snr_db: float = 10.0
    fading: str = "none"
    equalize: bool = True
    noise_seed: int = 0

    def __post_init__(self):
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError(f"snr_db must be finite or +inf, got {self.snr_db}")
        if self.fading not in ("none", "rayleigh"):
            raise ValueError(f"fading must be 'none' or 'rayleigh', got {self.fading!r}")

    @property
    def noiseless(self) -> bool:
        return self.snr_db == NOISELESS

    def with_snr(self, snr_db: float) -> "ChannelConfig":
        return replace(self, snr_db=snr_db)


@dataclass
class SymbolFrame:
    symbols: np.ndarray
    original_shape: Tuple[int, ...]
    padded: bool = False
    gain: complex = field(default=1.0 + 0.0j)

    @property
    def size(self) -> int:
        return int(np.prod(self.original_shape))


def reshape_to_symbols(f) -> SymbolFrame:
    """Pack consecutive reals ``(r0, r1)`` into ``r0 + 1j*r1``; an odd tail gets a zero."""
    f = np.asarray(f, dtype=np.float64)
    if f.size == 0:
        raise ValueError("cannot transmit an empty tensor")
    if not np.all(np.isfinite(f)):
        raise ValueError("tensor contains non-finite entries")
    flat = f.reshape(-1)
    padded = flat.size % 2 == 1
    if padded:
        flat = np.concatenate([flat, [0.0]])
    pairs = flat.reshape(-1, 2)
    return SymbolFrame(pairs[:, 0] + 1j * pairs[:, 1], tuple(f.shape), padded)


def unshape(frame: SymbolFrame) -> np.ndarray:
    flat = np.stack([frame.symbols.real, frame.symbols.imag], axis=-1).reshape(-1)
    return flat[: frame.size].reshape(frame.original_shape)


def noise_variance(signal_power: float, snr_db: float) -> float:
    if not signal_power > 0:
        raise ValueError(f"signal power must be positive, got {signal_power}")
    return signal_power / 10.0 ** (snr_db / 10.0)


def _rayleigh(rng: np.random.Generator, n: int) -> np.ndarray:
    h = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / math.sqrt(2.0)
    # a zero gain would make equalisation divide by zero; redraw those entries
    while np.any(h == 0):
        zero = h == 0
        h[zero] = (rng.standard_normal(zero.sum()) + 1j * rng.standard_normal(zero.sum())) / math.sqrt(2.0)
    return h


def _transmit_symbols(symbols: np.ndarray, cfg: ChannelConfig,
                      rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Send each row of ``symbols`` (shape ``(frames, n)``) as one frame."""
    frames = symbols.shape[0]
    if cfg.noiseless:
        return symbols.copy(), np.ones(frames, dtype=complex)
    power = np.mean(np.abs(symbols) ** 2, axis=1)
    # zero-power frames carry nothing to measure SNR against; they pass untouched
    live = power > 0
    var = np.zeros(frames)
    var[live] = power[live] / 10.0 ** (cfg.snr_db / 10.0)
    std = np.sqrt(var / 2.0)[:, None]
    noise = std * (rng.standard_normal(symbols.shape) + 1j * rng.standard_normal(symbols.shape))
    if cfg.fading == "rayleigh":
        h = _rayleigh(rng, frames)
    else:
        h = np.ones(frames, dtype=complex)
    received = h[:, None] * symbols + noise
    if cfg.equalize and cfg.fading != "none":
        received = received / h[:, None]
    received[~live] = symbols[~live]
    return received, h


def transmit(frame: SymbolFrame, cfg: ChannelConfig, rng: np.random.Generator) -> SymbolFrame:
    """Send one frame through the channel; the frame's gain records the drawn ``h``."""
    received, h = _transmit_symbols(frame.symbols[None, :], cfg, rng)
    return SymbolFrame(received[0], frame.original_shape, frame.padded, complex(h[0]))


def transmit_tensor(x, cfg: ChannelConfig, rng: np.random.Generator) -> np.ndarray:
    """reshape -> transmit -> unshape for a single tensor treated as one frame."""
    return unshape(transmit(reshape_to_symbols(x), cfg, rng))


def transmit_rows(x, cfg: ChannelConfig, rng: np.random.Generator) -> np.ndarray:
    """Transmit every row of a 2-D batch as its own frame (one sample, one frame)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise ValueError(f"expected a non-empty 2-D batch, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("batch contains non-finite entries")
    if cfg.noiseless:
        return x.copy()
    n, d = x.shape
    if d % 2:
        x = np.concatenate([x, np.zeros((n, 1))], axis=1)
    symbols = x[:, 0::2] + 1j * x[:, 1::2]
    received, _ = _transmit_symbols(symbols, cfg, rng)
    out = np.empty_like(x)
    out[:, 0::2] = received.real
    out[:, 1::2] = received.imag
    return out[:, :d]


def empirical_snr_db(sent: np.ndarray, received: np.ndarray) -> float:
    """``10 log10(mean|s|^2 / mean|r - s|^2)``; +inf when nothing was added."""
    err = np.mean(np.abs(received - sent) ** 2)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(np.mean(np.abs(sent) ** 2) / err)


def measure_snr(snr_db: float, n_symbols: int = 100_000, seed: int = 0) -> float:
    """Send ``n_symbols`` unit-power symbols over AWGN and return the measured SNR."""
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2 * np.pi, n_symbols)
    frame = SymbolFrame(np.exp(1j * phase), (2 * n_symbols,))
    out = transmit(frame, ChannelConfig(snr_db=snr_db, fading="none"), rng)
    return empirical_snr_db(frame.symbols, out.symbols)
