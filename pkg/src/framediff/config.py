"""Run configuration: ``key = value`` files with ``#`` comments, overridable by flags."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .diffusion import PARADIGMS


class ConfigError(ValueError):
    pass


def default_seed() -> int:
    return int(os.environ.get("FRAMEDIFF_SEED", "0"))


@dataclass(frozen=True)
class RunConfig:
    paradigm: str = "gfd"
    backbone: str = "edge"
    T: int = 100
    lam: float = 0.1
    egnn_layers: int = 3
    egnn_channels: int = 7
    egnn_hidden: int = 64
    depth: int = 4
    heads: int = 4
    width: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.01
    lr_schedule: str = "cosine"
    grad_clip: float = 1.0
    batch: int = 32
    noise_draws: int = 8
    steps: int = 2000
    seed: int = 0
    data: str = ""
    synth_n: int = 32
    data_seed: int = 0
    out: str = "run"
    ckpt_every: int = 500

    def validate(self) -> "RunConfig":
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if self.backbone not in ("edge", "plain"):
            raise ConfigError(f"backbone must be 'edge' or 'plain', got {self.backbone!r}")
        for name in ("T", "egnn_layers", "egnn_channels", "egnn_hidden", "depth", "heads", "width", "batch", "noise_draws", "steps", "ckpt_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.egnn_channels < 2:
            raise ConfigError("egnn_channels must be >= 2")
        if self.width % self.heads or self.width % 2:
            raise ConfigError("width must be even and divisible by heads")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0 (0 disables clipping)")
        if not self.data and self.synth_n < 1:
            raise ConfigError("need a data path or synth_n >= 1")
        return self

    def model_kwargs(self) -> dict:
        return dict(
            egnn_hidden=self.egnn_hidden, egnn_channels=self.egnn_channels, egnn_layers=self.egnn_layers,
            width=self.width, depth=self.depth, heads=self.heads, backbone=self.backbone, align_weight=self.lam,
        )

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    def updated(self, overrides: dict) -> "RunConfig":
        return replace(self, **coerce(overrides)).validate()


FULL_SCALE = dict(T=1000, egnn_hidden=256, depth=12, heads=6, width=384, lr=2e-4, batch=256)

_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(values: dict) -> dict:
    out = {}
    for k, v in values.items():
        if k not in _TYPES:
            raise ConfigError(f"unknown config key {k!r}")
        typ = _TYPES[k]
        try:
            if typ == "int":
                out[k] = int(v)
            elif typ == "float":
                out[k] = float(v)
            else:
                out[k] = str(v)
        except ValueError:
            raise ConfigError(f"bad value for {k}: {v!r}") from None
    return out


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {k!r}")
        values[k] = v
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    if "seed" not in values:
        values["seed"] = default_seed()
    return RunConfig().updated(values)
