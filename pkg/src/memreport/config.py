"""Run configuration: a flat record shared by the CLI, trainer, and experiments.

Stored as JSON so runs are diffable; unknown keys are rejected rather than
ignored because a typoed override silently falling back to a default is the
worst failure mode a config system can have.
"""

import dataclasses
import json
from dataclasses import dataclass

from .errors import ConfigError
from .model import MODES


@dataclass
class RunConfig:
    # model dimensions
    d: int = 64
    n_heads: int = 8
    n_enc: int = 3
    n_dec: int = 3
    n_slots: int = 3
    d_feat: int = 128
    max_len: int = 100
    mode: str = "base+rm+mcln"
    # optimizer schedule: the feature projector stands in for the visual
    # extractor, so it keeps the lower of the two published rates
    lr_visual: float = 5e-5
    lr_other: float = 1e-4
    lr_decay: float = 0.8
    # run shape
    epochs: int = 12
    batch_size: int = 16
    beam: int = 3
    length_norm: bool = False
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs/default"

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown ablation mode {self.mode!r}; expected one of {MODES}")
        for field in ("d", "n_heads", "n_enc", "n_dec", "n_slots", "d_feat",
                      "max_len", "epochs", "batch_size", "beam"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be at least 1, got {getattr(self, field)}")
        if self.d % self.n_heads:
            raise ConfigError(f"model width {self.d} not divisible by {self.n_heads} heads")
        for field in ("lr_visual", "lr_other", "lr_decay"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"{field} must be positive, got {getattr(self, field)}")
        if self.lr_decay > 1:
            raise ConfigError(f"lr_decay must not exceed 1, got {self.lr_decay}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must hold a JSON object")
        return cls.from_dict(data)

    def to_file(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def with_overrides(self, **overrides):
        """Copy with the given fields replaced; values are re-validated."""
        merged = self.to_dict()
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in merged:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = val
        return RunConfig.from_dict(merged)
