"""Run configuration: a flat JSON document with one section per module.

Unknown keys are rejected so typos cannot silently fall back to
defaults.  Two presets ship with the package: ``paper_logmel.json``
(single-channel spectrogram input, margin 0.7, leaky-ReLU perturbation
head) and ``paper_tfst.json`` (three-channel stacked features, margin
0.4, ReLU head).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .features import StftConfig
from .losses import ContrastiveConfig
from .training import TrainConfig


class ConfigError(Exception):
    """Malformed or unknown configuration content."""


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "mobilefacenet"  # or "toy"
    embedding_dim: int = 128


@dataclass(frozen=True)
class ArcFaceConfig:
    scale: float = 30.0
    margin: float | None = None  # None: resolved from the feature mode


@dataclass(frozen=True)
class FPHConfig:
    reduction: int | None = 64  # None disables the perturbation head
    activation: str | None = None  # None: resolved from the feature mode


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    arcface: ArcFaceConfig = field(default_factory=ArcFaceConfig)
    fph: FPHConfig = field(default_factory=FPHConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    def resolved(self) -> "RunConfig":
        """Fill mode-dependent defaults (margin, FPH activation)."""
        margin = self.arcface.margin
        activation = self.fph.activation
        logmel = self.train.feature_mode == "logmel"
        if margin is None:
            margin = 0.7 if logmel else 0.4
        if activation is None:
            activation = "leaky_relu" if logmel else "relu"
        return dataclasses.replace(
            self,
            arcface=ArcFaceConfig(scale=self.arcface.scale, margin=margin),
            fph=FPHConfig(reduction=self.fph.reduction, activation=activation),
        )

    def to_dict(self) -> dict:
        return {f.name: dataclasses.asdict(getattr(self, f.name)) for f in fields(self)}


_SECTIONS = {
    "train": TrainConfig,
    "stft": StftConfig,
    "model": ModelConfig,
    "arcface": ArcFaceConfig,
    "fph": FPHConfig,
    "contrastive": ContrastiveConfig,
}


def _build_section(cls, name: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value in section {name!r}: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    parts = {
        name: _build_section(cls, name, doc.get(name, {}))
        for name, cls in _SECTIONS.items()
    }
    return RunConfig(**parts)


def load_config(path_or_preset: str | Path) -> RunConfig:
    """Load a config from a file path, or from a bundled preset name."""
    path = Path(path_or_preset)
    if path.is_file():
        text = path.read_text()
    else:
        name = path.name if path.name.endswith(".json") else path.name + ".json"
        preset = resources.files("osscl.configs") / name
        if not preset.is_file():
            raise ConfigError(f"config file not found: {path_or_preset}")
        text = preset.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path_or_preset}: {exc}") from exc
    return config_from_dict(doc)


def apply_overrides(run: RunConfig, overrides: dict[str, object]) -> RunConfig:
    """Apply dotted ``section.key`` overrides, validating every name."""
    doc = run.to_dict()
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS or not key:
            raise ConfigError(f"unknown override target {dotted!r}")
        known = {f.name for f in fields(_SECTIONS[section])}
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section {section!r}")
        doc[section][key] = value
    return config_from_dict(doc)


def parse_override_value(text: str):
    """Parse a CLI override literal: JSON first, bare string as fallback."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text
