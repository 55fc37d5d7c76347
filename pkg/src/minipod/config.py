"""Experiment configuration: `key = value` text files and the preset catalog.

The catalog carries the published b2/b5 hyperparameter rows (pod-scale
replica counts and batch sizes) plus desk-scale toy presets. A preset is
applied first and explicit keys override it; unknown keys and duplicates are
rejected so typos never pass silently.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Preset:
    name: str
    model: str
    num_replicas: int
    global_batch: int
    optimizer: str
    lr_per_256: float
    decay: str
    warmup_epochs: float
    extra: tuple = ()  # additional (key, value) config overrides

    def as_overrides(self) -> dict:
        out = {
            "model": self.model,
            "num_replicas": self.num_replicas,
            "global_batch": self.global_batch,
            "optimizer": self.optimizer,
            "lr_per_256": self.lr_per_256,
            "decay": self.decay,
            "warmup_epochs": self.warmup_epochs,
        }
        out.update(dict(self.extra))
        return out


def _published(name, model, cores, batch, opt, lr, decay, warmup) -> Preset:
    return Preset(name, model, cores, batch, opt, lr, decay, warmup,
                  extra=(("total_epochs", 350.0),))


# One preset per published benchmark row (pod-scale), then the toy rows.
PRESETS: tuple[Preset, ...] = (
    _published("b2-rmsprop-4096", "b2", 128, 4096, "rmsprop", 0.016, "exponential", 5.0),
    _published("b2-rmsprop-8192", "b2", 256, 8192, "rmsprop", 0.016, "exponential", 5.0),
    _published("b2-rmsprop-16384", "b2", 512, 16384, "rmsprop", 0.016, "exponential", 5.0),
    _published("b2-lars-16384", "b2", 512, 16384, "lars", 0.236, "polynomial", 50.0),
    _published("b2-lars-32768", "b2", 1024, 32768, "lars", 0.118, "polynomial", 50.0),
    _published("b5-rmsprop-4096", "b5", 128, 4096, "rmsprop", 0.016, "exponential", 5.0),
    _published("b5-rmsprop-8192", "b5", 256, 8192, "rmsprop", 0.016, "exponential", 5.0),
    _published("b5-rmsprop-16384", "b5", 512, 16384, "rmsprop", 0.016, "exponential", 5.0),
    _published("b5-lars-16384", "b5", 512, 16384, "lars", 0.236, "polynomial", 50.0),
    _published("b5-lars-32768", "b5", 1024, 32768, "lars", 0.118, "polynomial", 50.0),
    _published("b5-lars-65536", "b5", 1024, 65536, "lars", 0.081, "polynomial", 43.0),
    Preset(
        "toy-rmsprop-512", "toy_cnn", 8, 512, "rmsprop", 0.03, "exponential", 1.0,
        extra=(("total_epochs", 12.0), ("bn_group_size", 8),
               ("eval_every_epochs", 2.0)),
    ),
    Preset(
        "toy-lars-2048", "toy_cnn", 8, 2048, "lars", 0.05, "polynomial", 2.0,
        extra=(("total_epochs", 20.0), ("bn_group_size", 8),
               ("eval_every_epochs", 5.0), ("lars_eta", 0.02)),
    ),
)

PRESETS_BY_NAME = {p.name: p for p in PRESETS}

_KEY_TYPES = {
    "preset": str,
    "model": str,
    "dataset": str,
    "num_replicas": int,
    "global_batch": int,
    "bn_group_size": int,
    "bn_grouping": str,
    "grid_rows": int,
    "grid_cols": int,
    "tile_rows": int,
    "tile_cols": int,
    "bn_momentum": float,
    "bn_eps": float,
    "optimizer": str,
    "lr_per_256": float,
    "warmup_epochs": float,
    "decay": str,
    "decay_rate": float,
    "epochs_per_decay": float,
    "poly_power": float,
    "end_lr": float,
    "momentum": float,
    "rmsprop_decay": float,
    "rmsprop_eps": float,
    "lars_eta": float,
    "lars_weight_decay": float,
    "precision": str,
    "total_epochs": float,
    "eval_every_epochs": float,
    "eval_batch": int,
    "seed": int,
}

_REQUIRED_WITHOUT_PRESET = (
    "model", "optimizer", "lr_per_256", "num_replicas", "global_batch",
)


def _parse_lines(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEY_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if not value:
            raise ConfigError(f"line {lineno}: key {key!r} has no value")
        raw[key] = value
    return raw


def _convert(key: str, value: str):
    typ = _KEY_TYPES[key]
    try:
        return typ(value)
    except ValueError as e:
        raise ConfigError(f"key {key!r}: cannot parse {value!r} as {typ.__name__}") from e


def parse_config(text: str) -> TrainConfig:
    """Parse config text into a validated TrainConfig."""
    raw = _parse_lines(text)
    values = {k: _convert(k, v) for k, v in raw.items()}

    merged: dict = {}
    preset_name = values.pop("preset", None)
    if preset_name is not None:
        if preset_name not in PRESETS_BY_NAME:
            raise ConfigError(
                f"unknown preset {preset_name!r}; see the presets listing")
        merged.update(PRESETS_BY_NAME[preset_name].as_overrides())
    else:
        missing = [k for k in _REQUIRED_WITHOUT_PRESET if k not in values]
        if missing:
            raise ConfigError(
                "required keys missing (or use a preset): " + ", ".join(missing))
    if "dataset" not in values:
        raise ConfigError("required keys missing: dataset")
    merged.update(values)

    try:
        return TrainConfig(**merged)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def preset_config(name: str, dataset: str = "synthetic", **overrides) -> TrainConfig:
    """TrainConfig from a catalog preset plus keyword overrides."""
    if name not in PRESETS_BY_NAME:
        raise ConfigError(f"unknown preset {name!r}")
    merged = PRESETS_BY_NAME[name].as_overrides()
    merged["dataset"] = dataset
    merged.update(overrides)
    return TrainConfig(**merged)


_SERIALIZE_SKIP = ("workers",)  # runtime knob, not part of the file surface


def serialize_config(config: TrainConfig) -> str:
    """Emit config text that parses back to an identical TrainConfig."""
    lines = []
    for f in dataclasses.fields(config):
        if f.name in _SERIALIZE_SKIP:
            continue
        value = getattr(config, f.name)
        if value is None:
            continue
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def presets_table() -> str:
    """Human-readable catalog listing (one row per preset)."""
    header = (
        f"{'name':<18} {'model':<7} {'cores':>5} {'batch':>6} {'optimizer':<9} "
        f"{'lr/256':>7} {'decay':<12} {'warmup':>6}"
    )
    lines = [header, "-" * len(header)]
    for p in PRESETS:
        lines.append(
            f"{p.name:<18} {p.model:<7} {p.num_replicas:>5} {p.global_batch:>6} "
            f"{p.optimizer:<9} {p.lr_per_256:>7} {p.decay:<12} {p.warmup_epochs:>6}"
        )
    return "\n".join(lines)
