"""Experiment configuration: TOML file, flag overrides, JSON record in the run dir.

Precedence is flags > file > defaults. Unknown sections or keys are errors so
typos never silently fall back to defaults.
"""
from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, nn
from .autoencoder import AeConfig
from .corpus import TEST_SNRS, TRAIN_SNRS
from .crq import CrqConfig
from .eofp import SUPPORTED_BITS
from .model import AvseConfig


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    manifest: str = "corpus/manifest.json"
    cache_dir: str = "cache"
    run_dir: str = "runs/default"


@dataclass
class AeTraining:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    frame_stride: int = 1  # use every n-th training frame


@dataclass
class Training:
    epochs: int = 20
    batch_size: int = 32
    lr: float = nn.DEFAULT_LR
    segment: int = 150
    budget: int = 12000


@dataclass
class Augmentation:
    ofr_k: int = 0
    lpr: float = 0.0
    train_snrs: list = field(default_factory=lambda: list(TRAIN_SNRS))
    test_snrs: list = field(default_factory=lambda: list(TEST_SNRS))


@dataclass
class ExperimentConfig:
    paths: Paths = field(default_factory=Paths)
    crq: CrqConfig = field(default_factory=CrqConfig)
    autoencoder: AeConfig = field(default_factory=AeConfig)
    ae_training: AeTraining = field(default_factory=AeTraining)
    model: AvseConfig = field(default_factory=AvseConfig)
    training: Training = field(default_factory=Training)
    augmentation: Augmentation = field(default_factory=Augmentation)
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.model.latent_bits not in SUPPORTED_BITS:
            raise ConfigError(f"model.latent_bits must be one of {SUPPORTED_BITS}")
        if self.autoencoder.resolution != self.crq.resolution:
            raise ConfigError(f"autoencoder.resolution ({self.autoencoder.resolution}) must match "
                              f"crq.resolution ({self.crq.resolution})")
        if self.autoencoder.channels != self.crq.channels:
            raise ConfigError(f"autoencoder.channels must be {self.crq.channels} for color {self.crq.color}")
        if self.autoencoder.latent_dim != self.model.latent_dim:
            raise ConfigError("autoencoder.latent_dim and model.latent_dim differ")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            out[f.name] = _section_dict(value) if dataclasses.is_dataclass(value) else value
        return out

    def save(self, run_dir) -> Path:
        """Record the resolved configuration (plus tool version) in ``run_dir``."""
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / "config.json"
        path.write_text(json.dumps({"version": __version__, "config": self.to_dict()}, indent=2))
        return path


def _section_dict(obj) -> dict:
    return {f.name: (list(v) if isinstance(v := getattr(obj, f.name), tuple) else v)
            for f in dataclasses.fields(obj)}


_SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(cls, name: str, values: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{name}] has unknown keys: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def from_dict(doc: dict) -> ExperimentConfig:
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown configuration sections: {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        fld = _SECTIONS[name]
        if isinstance(value, dict):
            kwargs[name] = _coerce(fld.default_factory().__class__, name, value)
        else:
            kwargs[name] = value
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def merge(doc: dict, overrides: dict) -> dict:
    """Apply ``{"section.key": value}`` (or top-level ``{"seed": 1}``) overrides."""
    doc = {k: dict(v) if isinstance(v, dict) else v for k, v in doc.items()}
    for dotted, value in overrides.items():
        if value is None:
            continue
        if "." in dotted:
            section, key = dotted.split(".", 1)
            doc.setdefault(section, {})[key] = value
        else:
            doc[dotted] = value
    return doc


def parse_assignments(items) -> dict:
    """``["training.epochs=5", ...]`` -> ``{"training.epochs": 5}``."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, text = item.split("=", 1)
        out[key.strip()] = _parse_value(text.strip())
    return out


def load(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the TOML file (if any), then ``overrides``."""
    doc = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(merge(doc, overrides or {}))


def load_resolved(run_dir) -> ExperimentConfig:
    doc = json.loads((Path(run_dir) / "config.json").read_text())
    return from_dict(doc["config"])
