"""Run configuration: one JSON file plus ``section.field=value`` overrides."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .autograd import ConfigError
from .localization import LocalizeConfig
from .losses import LossConfig
from .model import ModelConfig


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 1e-3
    batch_videos: int = 10
    pairs_per_batch: int = 3
    snippets_per_video: int = 500
    max_steps: int = 1000
    seed: int | None = None
    checkpoint_every: int = 0
    log_every: int = 1

    def validate(self) -> None:
        if self.seed is None:
            raise ConfigError("train.seed is mandatory")
        if self.lr < 0:
            raise ConfigError(f"train.lr must be non-negative, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be non-negative")
        if self.batch_videos < 1 or self.snippets_per_video < 1 or self.max_steps < 0:
            raise ConfigError("batch_videos, snippets_per_video must be >= 1 and max_steps >= 0")
        if not 0 <= self.pairs_per_batch <= self.batch_videos // 2:
            raise ConfigError("pairs_per_batch must fit in the batch")


@dataclass
class PathsConfig:
    manifest: str | None = None
    test_manifest: str | None = None
    checkpoint: str = "checkpoint.co2w"
    report_dir: str = "reports"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    localize: LocalizeConfig = field(default_factory=LocalizeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.localize.validate()
        self.train.validate()
        if self.loss.delta_mode != self.model.delta_mode:
            # one knob, two homes: the model section wins
            self.loss.delta_mode = self.model.delta_mode

    def to_dict(self) -> dict:
        return asdict(self)

    def training_hash(self) -> str:
        """Hash of everything that shapes the trained weights."""
        d = self.to_dict()
        payload = {k: d[k] for k in ("model", "loss", "train")}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def full_hash(self) -> str:
        d = self.to_dict()
        d.pop("paths")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {"model": ModelConfig, "loss": LossConfig, "localize": LocalizeConfig,
             "train": TrainConfig, "paths": PathsConfig}


def _build(cls, data: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")
    return cls(**data)


def config_from_dict(doc: dict) -> RunConfig:
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    parts = {name: _build(cls, doc.get(name, {}), name) for name, cls in _SECTIONS.items()}
    return RunConfig(**parts)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``section.field=value`` strings; values parse as JSON, else string."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not section.field=value")
        key, raw = item.split("=", 1)
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"override {item!r}: unknown section {section!r}")
        target = getattr(cfg, section)
        if name not in {f.name for f in fields(target)}:
            raise ConfigError(f"override {item!r}: {section} has no field {name!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        setattr(target, name, value)
    return cfg


def load_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    cfg = apply_overrides(config_from_dict(doc), overrides)
    base = path.parent
    for attr in ("manifest", "test_manifest", "checkpoint", "report_dir"):
        v = getattr(cfg.paths, attr)
        if v is not None and not Path(v).is_absolute():
            setattr(cfg.paths, attr, str(base / v))
    cfg.validate()
    return cfg
