"""Experiment configuration: a strict YAML document mapped onto dataclasses.

Unknown keys are errors.  Every default is written out in the resolved config
stored with each run.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, get_args, get_origin, get_type_hints

import yaml

from .losses import LossWeights
from .models import ARCHITECTURES


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticParams:
    class_signal: float = 0.10
    mode_signal: float = 0.20
    modes: int = 20
    texture: float = 0.5
    clutter: float = 0.15
    noise: float = 0.04
    templates_seed: int = 1234


@dataclass
class DatasetSpec:
    name: str = "synthetic"  # synthetic | folder | binary
    path: Optional[str] = None
    test_path: Optional[str] = None
    train_per_class: int = 500
    test_per_class: int = 200
    num_classes: int = 10
    image_size: int = 16
    channels: int = 3
    synthetic: SyntheticParams = field(default_factory=SyntheticParams)


@dataclass
class ClassifierSchedule:
    optimizer: str = "sgd"
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay: float = 0.1
    decay_every: int = 30
    epochs: int = 20
    batch_size: int = 64


@dataclass
class Stage2Weights:
    alpha: float = 0.5
    beta: float = 0.3


@dataclass
class TriggerSchedule:
    epochs: int = 30
    stage1_epochs: Optional[int] = None  # FMBA; None -> two thirds of epochs
    batch_size: int = 64
    lr: float = 1e-4
    k: float = 1.5
    epsilon: float = 80.0  # on the 0-255 scale
    final_bn_init: float = 1.0
    psnr_thresh: float = 35.0
    alpha: float = 0.5
    beta: float = 0.3
    gamma: float = 0.5
    stage2: Stage2Weights = field(default_factory=Stage2Weights)


@dataclass
class PoisonSpec:
    rate: float = 0.004


@dataclass
class DefenseSpec:
    strip_overlays: int = 16
    strip_blend: float = 0.5
    strip_inputs: int = 500
    prune_fractions: List[float] = field(default_factory=lambda: [round(0.05 * i, 2) for i in range(20)])


@dataclass
class Seeds:
    data: int = 0
    proxy: int = 1
    trigger: int = 2
    poison: int = 3
    victim: int = 4
    evaluation: int = 5


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    proxy_arch: str = "plain_cnn"
    victim_arch: str = "plain_cnn"
    paradigm: str = "fsba"
    classifier: ClassifierSchedule = field(default_factory=ClassifierSchedule)
    victim: Optional[ClassifierSchedule] = None  # None -> same as classifier
    trigger: TriggerSchedule = field(default_factory=TriggerSchedule)
    poison: PoisonSpec = field(default_factory=PoisonSpec)
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    seeds: Seeds = field(default_factory=Seeds)

    # -- derived ------------------------------------------------------------
    @property
    def victim_schedule(self) -> ClassifierSchedule:
        return self.victim if self.victim is not None else self.classifier

    @property
    def epsilon(self) -> float:
        return self.trigger.epsilon / 255.0

    @property
    def weights(self) -> LossWeights:
        t = self.trigger
        return LossWeights(t.alpha, t.beta, t.gamma)

    @property
    def stage2_weights(self) -> LossWeights:
        return LossWeights(self.trigger.stage2.alpha, self.trigger.stage2.beta, None)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self, *sections: str) -> str:
        d = self.to_dict()
        if sections:
            d = {s: d[s] for s in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> "ExperimentConfig":
        ds = self.dataset
        if ds.name not in ("synthetic", "folder", "binary"):
            raise ConfigError(f"dataset.name must be synthetic|folder|binary, got {ds.name!r}")
        if ds.name != "synthetic" and not ds.path:
            raise ConfigError("dataset.path is required for folder/binary datasets")
        if ds.image_size % 4:
            raise ConfigError("dataset.image_size must be divisible by 4")
        if ds.num_classes < 2:
            raise ConfigError("dataset.num_classes must be >= 2")
        for key in ("proxy_arch", "victim_arch"):
            if getattr(self, key) not in ARCHITECTURES:
                raise ConfigError(f"{key} {getattr(self, key)!r} not in {sorted(ARCHITECTURES)}")
        if self.paradigm not in ("fsba", "fmba"):
            raise ConfigError(f"paradigm must be fsba|fmba, got {self.paradigm!r}")
        for name, sched in (("classifier", self.classifier), ("victim", self.victim_schedule)):
            if sched.lr <= 0:
                raise ConfigError(f"{name}.lr must be > 0")
            if sched.epochs < 0:
                raise ConfigError(f"{name}.epochs must be >= 0")
            if sched.optimizer not in ("sgd", "adam"):
                raise ConfigError(f"{name}.optimizer must be sgd|adam")
        t = self.trigger
        if t.lr < 0 or t.epochs < 0:
            raise ConfigError("trigger.lr and trigger.epochs must be non-negative")
        if t.stage1_epochs is not None and not 0 <= t.stage1_epochs <= t.epochs:
            raise ConfigError("trigger.stage1_epochs must lie in [0, trigger.epochs]")
        if self.paradigm == "fsba" and t.k <= 1:
            raise ConfigError("trigger.k must be > 1")
        if not 0 < t.epsilon <= 255:
            raise ConfigError("trigger.epsilon must lie in (0, 255]")
        if t.psnr_thresh <= 0:
            raise ConfigError("trigger.psnr_thresh must be > 0")
        for w in ("alpha", "beta", "gamma"):
            if getattr(t, w) < 0:
                raise ConfigError(f"trigger.{w} must be >= 0")
        if not 0 <= self.poison.rate <= 1:
            raise ConfigError("poison.rate must lie in [0, 1]")
        d = self.defense
        if d.strip_overlays < 1 or not 0 < d.strip_blend < 1:
            raise ConfigError("defense.strip_overlays >= 1 and 0 < defense.strip_blend < 1 required")
        return self


def _build(cls, data: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        if cls is Stage2Weights and "gamma" in unknown:
            raise ConfigError(f"{path}.gamma: the second FMBA stage has no visual term")
        raise ConfigError(f"unknown key(s) at {path or 'top level'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        sub = path + "." + name if path else name
        if get_origin(hint) is not None and type(None) in get_args(hint):
            inner = [a for a in get_args(hint) if a is not type(None)][0]
            kwargs[name] = None if value is None else _build(inner, value, sub)
        else:
            kwargs[name] = _build(hint, value, sub)
    return cls(**kwargs)


def config_from_dict(data: Optional[dict]) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "").validate()


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
