"""Flat run configuration: defaults, key = value files, flag overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .fileio import read_key_value_file, write_key_value_file
from .fusion import FusionThresholds
from .losses import LossWeights
from .pipeline import NetworkConfig


class UnknownConfigKeyError(KeyError):
    """An unrecognized key in a config file or override set."""


@dataclass
class RunConfig:
    """Every tunable of the toolchain; precedence is flag > file > default."""

    # network
    depth_counts: tuple = (32, 16, 8)
    range_factor: float = 1.5
    groups: int = 8
    channels: int = 32
    base_channels: int = 16
    regularizer_channels: int = 8
    window: int = 3
    # loss
    beta_feature: float = 1.0
    beta_depth: float = 1.0
    epsilon: float = 0.01
    scale_weights: tuple = (0.5, 1.0, 2.0)
    block: int = 3
    # training
    learning_rate: float = 0.0016
    num_sources: int = 2
    num_sources_test: int = 5
    epochs: int = 16
    train_steps: int = 0          # 0: derive from epochs * scene count
    batch_size: int = 1
    checkpoint_every: int = 500
    crop_height: int = 0          # 0: no cropping
    crop_width: int = 0
    seed: int = 0
    # synthesis
    scene_height: int = 64
    scene_width: int = 80
    scene_views: int = 3
    # fusion
    prob_min: float = 0.3
    reproj_max: float = 1.0
    rel_depth_max: float = 0.01
    min_views: int = 3
    # evaluation
    max_dist: float = 20.0

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            depth_counts=tuple(self.depth_counts),
            range_factor=self.range_factor,
            groups=self.groups,
            channels=self.channels,
            base_channels=self.base_channels,
            regularizer_channels=self.regularizer_channels,
            window=self.window,
            loss=LossWeights(self.beta_feature, self.beta_depth, self.epsilon,
                             tuple(self.scale_weights), self.block),
            learning_rate=self.learning_rate,
            num_sources=self.num_sources,
            seed=self.seed,
        )

    def fusion_thresholds(self) -> FusionThresholds:
        return FusionThresholds(self.prob_min, self.reproj_max,
                                self.rel_depth_max, self.min_views)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(name, text):
    default = getattr(RunConfig(), name)
    text = text.strip()
    try:
        if isinstance(default, tuple):
            parts = [p for p in text.replace(",", " ").split() if p]
            elem = int if all(isinstance(v, int) for v in default) else float
            return tuple(elem(p) for p in parts)
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ValueError(f"config key {name!r}: cannot parse {text!r}") from None
    return text


def build_config(file_path=None, overrides=None) -> RunConfig:
    """RunConfig from defaults, then a key = value file, then explicit overrides."""
    config = RunConfig()
    for source in (read_key_value_file(file_path) if file_path else {},
                   overrides or {}):
        for key, value in source.items():
            if key not in _FIELDS:
                raise UnknownConfigKeyError(key)
            if isinstance(value, str):
                value = _parse_value(key, value)
            setattr(config, key, value)
    return config


def snapshot(config: RunConfig, path):
    """Write the effective configuration next to a command's outputs."""
    values = {}
    for key, value in asdict(config).items():
        if isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        values[key] = value
    write_key_value_file(path, values)
