"""Flat key-value run configuration.

One JSON object with scalar (or flat list) values covers the model, the
training loop, the data splits and the detection post-processing. Unknown
keys and nested objects are rejected so the copy echoed into checkpoints
always round-trips exactly. Every key has a default; the training defaults
(batch size 12, learning rate 1e-4, lambda1 10, lambda2 25) are the
reference settings the package is calibrated around.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .nets import ModelConfig


@dataclass(frozen=True)
class RunConfig:
    # model
    unet_depth: int = 4
    unet_base_channels: int = 16
    detector_channels: int = 64
    domain_head_channels: int = 32
    anchor_strides: tuple[int, ...] = (8, 16)
    anchor_scales: tuple[float, ...] = (1.0, 1.5, 2.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    grl_strength: float = 1.0
    domain_head_placement: str = "decoder"
    homogenizer_enabled: bool = True
    feature_layers: tuple[int, ...] = (0, 1, 2)
    extractor_channels: tuple[int, ...] = (16, 32, 64)
    extractor_seed: int = 0
    extractor_gain: float = 2.0
    extractor_weights: str = ""
    # training
    batch_size: int = 12
    learning_rate: float = 1e-4
    max_steps: int = 1000
    seed: int = 0
    lambda1: float = 10.0
    lambda2: float = 25.0
    eval_interval: int = 0
    checkpoint_interval: int = 0
    include_unlabeled: bool = False
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    pos_threshold: float = 0.5
    neg_threshold: float = 0.4
    lr_schedule: str = "constant"
    # data
    split_train: float = 0.8
    split_val: float = 0.1
    split_test: float = 0.1
    split_seed: int = 0
    point_box_size: float = 50.0
    # evaluation / post-processing
    eval_iou: float = 0.5
    nms_iou: float = 0.5
    score_floor: float = 0.05
    max_detections: int = 100

    def to_dict(self) -> dict:
        """Flat JSON-safe dict (tuples become lists)."""
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def to_model_config(self, num_domains: int) -> ModelConfig:
        return ModelConfig(
            unet_depth=self.unet_depth,
            unet_base_channels=self.unet_base_channels,
            num_domains=num_domains,
            anchor_strides=tuple(self.anchor_strides),
            anchor_scales=tuple(self.anchor_scales),
            anchor_ratios=tuple(self.anchor_ratios),
            detector_channels=self.detector_channels,
            domain_head_channels=self.domain_head_channels,
            grl_strength=self.grl_strength,
            domain_head_placement=self.domain_head_placement,
            homogenizer_enabled=self.homogenizer_enabled,
            feature_layers=tuple(self.feature_layers),
            extractor_channels=tuple(self.extractor_channels),
            extractor_seed=self.extractor_seed,
            extractor_gain=self.extractor_gain,
        )

    @property
    def split_fractions(self) -> tuple[float, float, float]:
        return (self.split_train, self.split_val, self.split_test)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{name}' must be true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) \
                or int(value) != value:
            raise ConfigError(f"config key '{name}' must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{name}' must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key '{name}' must be a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key '{name}' must be a flat list of numbers")
        elem = default[0]
        return tuple(_coerce(f"{name}[]", v, elem) for v in value)
    raise AssertionError(f"unhandled config field type for {name}")


def parse_run_config(doc: dict) -> RunConfig:
    """Build a RunConfig from a flat dict; unknown keys and nested values
    are configuration errors."""
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a flat JSON object")
    kwargs = {}
    for key, value in doc.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key '{key}'")
        if isinstance(value, dict):
            raise ConfigError(f"config key '{key}' must be flat, got a nested object")
        kwargs[key] = _coerce(key, value, _FIELDS[key].default)
    return RunConfig(**kwargs)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return parse_run_config(doc)


def save_run_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
