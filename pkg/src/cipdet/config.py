"""Runtime configuration shared by the detection pipeline and CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration file or values."""


@dataclass
class Config:
    window_length: int = 100
    window_stride: int = 50
    trws_max_iters: int = 100
    trws_epsilon: float = 1e-4
    tracklet_iou: float = 0.3
    w_intra: float = 1.0
    w_frame: float = 1.0
    w_traj: float = 1.0
    eval_iou: float = 0.5
    config_version: int = CONFIG_VERSION

    def validate(self) -> "Config":
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {self.config_version}")
        for name in ("window_length", "window_stride", "trws_max_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("trws_epsilon", "tracklet_iou", "eval_iou"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("w_intra", "w_frame", "w_traj"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        return self

    @classmethod
    def from_file(cls, path: Path | str) -> "Config":
        with open(path) as f:
            raw = json.load(f)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw).validate()

    def to_file(self, path: Path | str) -> None:
        with open(path, "w") as f:
            json.dump(dataclasses.asdict(self), f, indent=1, sort_keys=True)
            f.write("\n")
