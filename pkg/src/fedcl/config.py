"""Experiment configuration: flat ``key = value`` files plus command-line overrides."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Tuple

from .channel import ChannelConfig
from .data import ConfigError
from .models import DecoderSpec, EncoderSpec

SCHEMES = ("fedcl", "fedproto", "fedavg", "vanilla")


def _parse_dims(text: str) -> Tuple[Tuple[int, ...], ...]:
    """``"64"`` -> one spec; ``"64;32,32"`` -> per-client specs; ``""`` -> no hidden layer."""
    specs = []
    for part in text.split(";"):
        part = part.strip()
        specs.append(tuple(int(v) for v in part.split(",") if v.strip()) if part else ())
    return tuple(specs)


def _format_dims(specs) -> str:
    return ";".join(",".join(str(v) for v in s) for s in specs)


def _parse_lrs(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none") else float(text)


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of an experiment.

    ``encoder_hidden`` holds one hidden-layer tuple per client; when fewer
    tuples than clients are given they are reused round-robin. ``client_lrs``
    works the same way.
    """

    scheme: str = "fedcl"
    clients: int = 5
    rounds: int = 200
    num_classes: int = 10
    m: int = 2
    q: int = 50
    batch_size: int = 32
    local_iters: int = 1
    scg_iters: int = 1
    lam: float = 1.0
    lr: float = 1e-3
    client_lrs: Tuple[float, ...] = (1e-3,)
    snr_db: float = 10.0
    downlink_snr_db: Optional[float] = None
    fading: str = "none"
    equalize: bool = True
    input_dim: int = 32
    feature_dim: int = 64
    encoder_hidden: Tuple[Tuple[int, ...], ...] = ((64,),)
    decoder_hidden: Tuple[int, ...] = (64,)
    scg_hidden: int = 64
    centroid_rms: Optional[float] = 3.0
    dataset: str = "blobs"
    n_per_class: int = 500
    n_test_per_class: int = 100
    test_fraction: float = 0.2
    spread: float = 1.0
    radius: float = 4.0
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        for name in ("clients", "num_classes", "m", "q", "batch_size", "input_dim",
                     "feature_dim", "scg_hidden", "n_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("rounds", "local_iters", "scg_iters", "n_test_per_class"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.m > self.num_classes:
            raise ConfigError(f"m = {self.m} exceeds the number of classes C = {self.num_classes}")
        if self.clients * self.m < self.num_classes:
            raise ConfigError(f"clients * m = {self.clients * self.m} cannot cover C = {self.num_classes}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if not self.lr > 0 or not self.client_lrs or any(not v > 0 for v in self.client_lrs):
            raise ConfigError("learning rates must be positive")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ConfigError("snr_db must be a number or inf")
        if self.fading not in ("none", "rayleigh"):
            raise ConfigError(f"fading must be 'none' or 'rayleigh', got {self.fading!r}")
        if not self.encoder_hidden:
            raise ConfigError("encoder_hidden needs at least one entry")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in [0, 1)")
        if self.centroid_rms is not None and not self.centroid_rms > 0:
            raise ConfigError("centroid_rms must be positive or none")
        if not self.spread > 0:
            raise ConfigError("spread must be positive")
        if self.scheme == "fedavg" and len({self.encoder_hidden[k % len(self.encoder_hidden)]
                                            for k in range(self.clients)}) > 1:
            raise ConfigError("fedavg needs identical encoder architectures on every client")

    def encoder_spec(self, k: int) -> EncoderSpec:
        hidden = self.encoder_hidden[k % len(self.encoder_hidden)]
        return EncoderSpec(self.input_dim, hidden, self.feature_dim)

    def decoder_spec(self) -> DecoderSpec:
        return DecoderSpec(self.feature_dim, self.decoder_hidden, self.num_classes)

    @property
    def centroid_radius(self) -> Optional[float]:
        """Fixed centroid length, ``centroid_rms`` per coordinate; ``None`` for unconstrained."""
        if self.centroid_rms is None:
            return None
        return self.centroid_rms * math.sqrt(self.feature_dim)

    def client_lr(self, k: int) -> float:
        return self.client_lrs[k % len(self.client_lrs)]

    def channels(self) -> Tuple[ChannelConfig, ChannelConfig]:
        up = ChannelConfig(snr_db=self.snr_db, fading=self.fading, equalize=self.equalize,
                           noise_seed=self.seed)
        down = up if self.downlink_snr_db is None else up.with_snr(self.downlink_snr_db)
        return up, down

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "encoder_hidden":
                v = _format_dims(v)
            elif f.name == "decoder_hidden":
                v = _format_dims((v,))
            elif f.name == "client_lrs":
                v = ",".join(repr(x) for x in v)
            elif v is None:
                v = "none"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_PARSERS = {
    "scheme": str, "dataset": str, "out": str, "fading": str,
    "equalize": _parse_bool,
    "downlink_snr_db": _parse_optional_float,
    "centroid_rms": _parse_optional_float,
    "encoder_hidden": _parse_dims,
    "decoder_hidden": lambda s: _parse_dims(s)[0],
    "client_lrs": _parse_lrs,
}

# accepted spellings that map onto field names
ALIASES = {"lambda": "lam", "K": "clients", "T": "rounds", "C": "num_classes", "B": "batch_size",
           "E": "local_iters", "E_prime": "scg_iters", "eta": "lr", "eta_k": "client_lrs",
           "client_lr": "client_lrs"}


def coerce(key: str, raw: str):
    key = ALIASES.get(key, key)
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    if key in _PARSERS:
        parse = _PARSERS[key]
    elif types[key] == "int":
        parse = int
    else:
        parse = float
    try:
        return key, parse(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            k, v = coerce(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
        values[k] = v
    return values


def parse_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (already typed or raw strings)."""
    values = {}
    if path is not None:
        path = Path(path)
        values.update(parse_text(path.read_text(), str(path)))
    for key, v in (overrides or {}).items():
        if v is None:
            continue
        if isinstance(v, str):
            key, v = coerce(key, v)
        values[ALIASES.get(key, key)] = v
    return ExperimentConfig(**values)


def config_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
