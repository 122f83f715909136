"""Run configuration: flat ``section.key = value`` text, validated field by field."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli


class ConfigError(ValueError):
    """A configuration field is missing, unknown, mistyped or out of range."""


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    depth: int = 6
    n_heads: int = 4
    mlp_layers: int = 2
    patch: int = 16
    channels: int = 3
    template_size: int = 64
    search_size: int = 128
    head_width: int = 64
    head_stages: int = 4


@dataclass(frozen=True)
class BypassConfig:
    rho: float = 0.5
    tau0: float = 0.4
    zeta: float = 0.1
    n_enf: int = 2


@dataclass(frozen=True)
class PruneConfig:
    mu: float = 0.3
    alpha: float = 1e-4
    dr_init: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-4
    weight_decay: float = 1e-4
    epochs: int = 30
    batch: int = 16
    lr_drop_epoch: int = 24
    seed: int = 0
    samples_per_epoch: int = 256


@dataclass(frozen=True)
class LossConfig:
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    gamma: float = 5.0


@dataclass(frozen=True)
class DataConfig:
    easy_fraction: float = 0.5
    sequence_length: int = 20
    num_sequences: int = 200
    frame_size: int = 160
    eval_sequences: int = 20
    template_factor: float = 2.0
    search_factor: float = 4.0


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    bypass: BypassConfig = field(default_factory=BypassConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        validate(self)

    def to_text(self) -> str:
        return dump(self)

    def hash(self) -> str:
        return hashlib.sha256(dump(self).encode()).hexdigest()[:16]

    def with_updates(self, **dotted: Any) -> Config:
        """``cfg.with_updates(**{"train.epochs": 3})``."""
        flat = flatten(self)
        for key, value in dotted.items():
            if key not in flat:
                raise ConfigError(f"{key}: unknown configuration key")
            flat[key] = value
        return from_flat(flat)


_SECTION_TYPES = {
    "model": ModelConfig,
    "bypass": BypassConfig,
    "prune": PruneConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "data": DataConfig,
}

# (low, high, low_inclusive, high_inclusive); None means unbounded
_RANGES: dict[str, tuple] = {
    "model.d": (1, None, True, True),
    "model.depth": (1, None, True, True),
    "model.n_heads": (1, None, True, True),
    "model.mlp_layers": (1, None, True, True),
    "model.patch": (1, None, True, True),
    "model.channels": (1, None, True, True),
    "model.template_size": (1, None, True, True),
    "model.search_size": (1, None, True, True),
    "model.head_width": (1, None, True, True),
    "model.head_stages": (1, None, True, True),
    "bypass.rho": (0.0, 1.0, True, True),
    "bypass.tau0": (0.0, 1.0, True, True),
    "bypass.zeta": (0.0, None, False, True),
    "bypass.n_enf": (0, None, True, True),
    "prune.mu": (0.0, 1.0, False, True),
    "prune.alpha": (0.0, None, False, True),
    "prune.dr_init": (None, None, True, True),
    "train.lr": (0.0, None, False, True),
    "train.weight_decay": (0.0, None, True, True),
    "train.epochs": (1, None, True, True),
    "train.batch": (1, None, True, True),
    "train.lr_drop_epoch": (0, None, True, True),
    "train.seed": (0, None, True, True),
    "train.samples_per_epoch": (1, None, True, True),
    "loss.lambda_iou": (0.0, None, True, True),
    "loss.lambda_l1": (0.0, None, True, True),
    "loss.gamma": (0.0, None, True, True),
    "data.easy_fraction": (0.0, 1.0, True, True),
    "data.sequence_length": (2, None, True, True),
    "data.num_sequences": (1, None, True, True),
    "data.frame_size": (16, None, True, True),
    "data.eval_sequences": (1, None, True, True),
    "data.template_factor": (1.0, None, True, True),
    "data.search_factor": (1.0, None, True, True),
}


def _check_range(key: str, value) -> None:
    lo, hi, lo_inc, hi_inc = _RANGES[key]
    bad_lo = lo is not None and (value < lo if lo_inc else value <= lo)
    bad_hi = hi is not None and (value > hi if hi_inc else value >= hi)
    if bad_lo or bad_hi:
        left = "[" if lo_inc else "("
        right = "]" if hi_inc else ")"
        span = f"{left}{'-inf' if lo is None else lo}, {'inf' if hi is None else hi}{right}"
        raise ConfigError(f"{key}: must lie in {span}, got {value}")


def validate(cfg: Config) -> None:
    for section, sect_type in _SECTION_TYPES.items():
        sect = getattr(cfg, section)
        if not isinstance(sect, sect_type):
            raise ConfigError(f"{section}: expected a {sect_type.__name__}")
        for f in fields(sect):
            key = f"{section}.{f.name}"
            value = getattr(sect, f.name)
            want = f.type if isinstance(f.type, type) else {"int": int, "float": float}[f.type]
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key}: expected {want.__name__}, got {value!r}")
            if want is int and not isinstance(value, int):
                raise ConfigError(f"{key}: expected int, got {value!r}")
            _check_range(key, value)
    m, b, t = cfg.model, cfg.bypass, cfg.train
    if m.d % m.n_heads:
        raise ConfigError(f"model.n_heads: {m.n_heads} does not divide model.d = {m.d}")
    for name in ("template_size", "search_size"):
        if getattr(m, name) % m.patch:
            raise ConfigError(f"model.{name}: {getattr(m, name)} not divisible by model.patch = {m.patch}")
    if not b.n_enf < m.depth:
        raise ConfigError(f"bypass.n_enf: must be < model.depth = {m.depth}, got {b.n_enf}")
    if (m.d * cfg.prune.mu) // m.n_heads < 1 - 1e-9:
        raise ConfigError(f"prune.mu: {cfg.prune.mu} keeps no head-aligned dimension of d = {m.d}")
    if t.lr_drop_epoch > t.epochs:
        raise ConfigError(f"train.lr_drop_epoch: must be <= train.epochs = {t.epochs}, got {t.lr_drop_epoch}")


def flatten(cfg: Config) -> dict[str, Any]:
    return {f"{s}.{k}": v for s, sect in asdict(cfg).items() for k, v in sect.items()}


def from_flat(flat: dict[str, Any]) -> Config:
    sections: dict[str, dict[str, Any]] = {name: {} for name in _SECTION_TYPES}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise ConfigError(f"{key}: unknown configuration key")
        known = {f.name: f for f in fields(_SECTION_TYPES[section])}
        if name not in known:
            raise ConfigError(f"{key}: unknown configuration key")
        ftype = known[name].type
        if ftype in (float, "float") and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        sections[section][name] = value
    try:
        parts = {s: _SECTION_TYPES[s](**vals) for s, vals in sections.items()}
    except TypeError as exc:  # pragma: no cover - guarded above
        raise ConfigError(str(exc)) from exc
    return Config(**parts)


def loads(text: str) -> Config:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    flat: dict[str, Any] = {}
    for section, body in doc.items():
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: unknown configuration key")
        for name, value in body.items():
            if isinstance(value, dict):
                raise ConfigError(f"{section}.{name}: unknown configuration key")
            flat[f"{section}.{name}"] = value
    return from_flat(flat)


def load(path: str | Path) -> Config:
    return loads(Path(path).read_text())


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump(cfg: Config) -> str:
    return "".join(f"{key} = {_fmt(value)}\n" for key, value in flatten(cfg).items())


def save(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(dump(cfg))


def desk_header(cfg: Config) -> list[str]:
    """Comment lines recording where the desk-scale schedule departs from the reference one."""
    t = cfg.train
    return [
        f"# desk-scale schedule: lr {t.lr:g} (reference 4e-5), epochs {t.epochs} (reference 300), "
        f"batch {t.batch} (reference 32), lr drop at epoch {t.lr_drop_epoch} (reference 240)",
    ]


__all__ = [
    "Config",
    "ConfigError",
    "ModelConfig",
    "BypassConfig",
    "PruneConfig",
    "TrainConfig",
    "LossConfig",
    "DataConfig",
    "loads",
    "load",
    "dump",
    "save",
    "flatten",
    "from_flat",
    "desk_header",
]
