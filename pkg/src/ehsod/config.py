"""Configuration dataclasses and the run-config file loader.

A run config is a YAML (or JSON) mapping with the sections ``model``,
``cam_rpn``, ``cascade``, ``train`` and ``data``.  Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int = 3
    width: int = 32                       # pyramid channel width D
    stage_channels: tuple[int, ...] = (32, 48, 64, 96)
    blocks_per_stage: int = 1
    strides: tuple[int, ...] = (4, 8, 16, 32)
    roi_size: int = 7
    fc_dim: int = 128
    pretrained: str | None = None

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("model.num_classes must be >= 1")
        if len(self.stage_channels) != 4 or len(self.strides) != 4:
            raise ConfigError("the feature pyramid has exactly 4 levels")
        if list(self.strides) != [4, 8, 16, 32]:
            raise ConfigError("model.strides must be (4, 8, 16, 32)")


@dataclass
class CamRpnConfig:
    sigma: float = 0.8
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    alpha1: float = 0.1                   # L_CAM-cls
    alpha2: float = 0.2                   # L_CAM-seg
    alpha3: float = 1.0                   # L_RPN-cls
    alpha4: float = 1.0                   # L_RPN-reg
    use_cam: bool = True                  # CAM losses and CAM-fused proposal scoring
    # FPN level rule: level = clamp(floor(l0 + log2(sqrt(wh) / s0)), 1, 4)
    canonical_level: int = 3
    canonical_size: float = 224.0
    anchor_scale: float = 8.0             # anchor side = scale * stride
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch_size: int = 256
    rpn_pos_fraction: float = 0.5
    nms_threshold: float = 0.7
    pre_nms_top_k: int = 2000
    train_proposals: int = 2000
    test_proposals: int = 1000
    min_proposal_size: float = 0.0

    def validate(self) -> None:
        if not 0.0 < self.sigma <= 1.0:
            raise ConfigError("cam_rpn.sigma must be in (0, 1]")
        if self.focal_gamma < 0:
            raise ConfigError("cam_rpn.focal_gamma must be >= 0")
        for name in ("focal_alpha", "alpha1", "alpha2", "alpha3", "alpha4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"cam_rpn.{name} must be >= 0")
        if not 0.0 <= self.nms_threshold <= 1.0:
            raise ConfigError("cam_rpn.nms_threshold must be in [0, 1]")
        if len(self.anchor_ratios) == 0:
            raise ConfigError("cam_rpn.anchor_ratios must not be empty")

    @property
    def weights(self) -> tuple[float, float, float, float]:
        return (self.alpha1, self.alpha2, self.alpha3, self.alpha4)


@dataclass
class CascadeConfig:
    stage_thresholds: tuple[float, ...] = (0.5, 0.6, 0.7)
    stage_weights: tuple[float, ...] = (1.0, 0.5, 0.25)
    beta: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    stage_stds: tuple[tuple[float, ...], ...] = (
        (0.1, 0.1, 0.2, 0.2),
        (0.05, 0.05, 0.1, 0.1),
        (0.033, 0.033, 0.067, 0.067),
        (0.025, 0.025, 0.05, 0.05),
    )
    samples_per_image: int = 512
    pos_fraction: float = 0.25
    add_gt_as_proposals: bool = True
    score_threshold: float = 0.05
    nms_threshold: float = 0.5
    max_detections: int = 100

    @property
    def num_stages(self) -> int:
        return len(self.stage_thresholds)

    def validate(self) -> None:
        t = list(self.stage_thresholds)
        if not 1 <= len(t) <= 4:
            raise ConfigError("cascade supports 1 to 4 stages")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ConfigError("cascade.stage_thresholds must be strictly increasing")
        if any(not 0 < x < 1 for x in t):
            raise ConfigError("cascade.stage_thresholds must lie in (0, 1)")
        if len(self.stage_weights) != len(t):
            raise ConfigError("cascade.stage_weights must match stage_thresholds")
        if len(self.stage_stds) < len(t):
            raise ConfigError("cascade.stage_stds needs one entry per stage")
        if any(w < 0 for w in self.stage_weights) or any(b < 0 for b in self.beta):
            raise ConfigError("cascade loss weights must be >= 0")
        if len(self.beta) != 4:
            raise ConfigError("cascade.beta has exactly four entries")


@dataclass
class TrainConfig:
    lambda0: float = 1.0
    epochs: int = 12
    batch_size: int = 8
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_steps: tuple[int, ...] = (9,)
    lr_factor: float = 0.1
    warmup_iters: int = 50
    warmup_ratio: float = 1.0 / 3
    grad_clip: float | None = 10.0
    hflip: bool = True
    seed: int = 0
    checkpoint_every: int = 4
    divergence_factor: float = 1e3

    def validate(self) -> None:
        if self.lambda0 < 0:
            raise ConfigError("train.lambda0 must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and batch_size >= 1")
        steps = list(self.lr_steps)
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigError("train.lr_steps must be increasing")


@dataclass
class DataConfig:
    train: str | None = None
    test: str | None = None
    format: str = "native-json"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    cam_rpn: CamRpnConfig = field(default_factory=CamRpnConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.cam_rpn.validate()
        self.cascade.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        return _build(cls, raw or {}, "").validate()

    def replace(self, overrides: dict[str, Any]) -> "RunConfig":
        merged = self.to_dict()
        for key, value in overrides.items():
            _set_dotted(merged, key, value)
        return RunConfig.from_dict(merged)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _build(cls, raw: Any, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        where = f" in {prefix}" if prefix else ""
        raise ConfigError(f"unknown config key(s){where}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in raw.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        elif isinstance(default, tuple) and value is not None:
            kwargs[name] = _as_tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _as_tuple(value):
    if isinstance(value, (list, tuple)):
        return tuple(_as_tuple(v) if isinstance(v, (list, tuple)) else v for v in value)
    return (value,)


def _set_dotted(tree: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config section: {key}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {key}")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """Parse ``section.key=value``; the value is read as YAML."""
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value: {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def _flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for key, value in tree.items():
        if isinstance(value, dict):
            out.update(_flatten(value, f"{prefix}{key}."))
        else:
            out[f"{prefix}{key}"] = value
    return out


def load_config(path: str | os.PathLike | None, overrides: list[str] | None = None,
                preset: str = "default") -> RunConfig:
    """Preset defaults, then the YAML file, then ``section.key=value`` overrides."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    cfg = PRESETS[preset]()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        raw = yaml.safe_load(p.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        RunConfig.from_dict(raw)  # rejects unknown keys with their section
        cfg = cfg.replace(_flatten(raw))
    if overrides:
        cfg = cfg.replace(dict(parse_override(o) for o in overrides))
    return cfg


def synthetic_preset() -> RunConfig:
    """Defaults scaled down for 64x64 synthetic-shape images."""
    return RunConfig.from_dict({
        "cam_rpn": {
            "canonical_level": 2,
            "canonical_size": 32.0,
            "anchor_scale": 4.0,
            "pre_nms_top_k": 600,
            "train_proposals": 64,
            "test_proposals": 64,
            "rpn_batch_size": 128,
        },
        "cascade": {"samples_per_image": 128},
        # Clipping at norm 10 engaged on most steps here and slowed every run.
        "train": {"batch_size": 4, "grad_clip": None, "checkpoint_every": 12},
    })


PRESETS = {"default": RunConfig, "synthetic": synthetic_preset}
