"""Flat key=value run configuration.

One key per line, `#` comments, blank lines ignored. Every key has a default
right here in the dataclass; unknown keys are hard errors so typos never
silently fall back. CLI flags override file values, which override defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .data import SyntheticSpec


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # global
    seed: int = 0
    # image geometry
    image_height: int = 64
    image_width: int = 32
    # backbone
    patch_size: int = 4
    embed_dim: int = 32
    depths: tuple = (2, 2)
    heads: tuple = (2, 4)
    window_size: int = 4
    mlp_ratio: float = 2.0
    shifted_windows: bool = False
    controller_hidden: int = 16
    # projection head
    proj_hidden: int = 256
    proj_bottleneck: int = 256
    prototypes: int = 1024
    # contrastive objective
    temp_student: float = 0.1
    temp_teacher: float = 0.04
    center_momentum: float = 0.9
    ema_momentum: float = 0.996
    # semantic branch
    parts: int = 3
    head_hidden: int = 64
    head_blocks: int = 2
    mask_enabled: bool = True
    alpha: float = 0.5
    lambda_dist: str = "bernoulli:0.5"
    # optimization
    batch_size: int = 32
    epochs_dino: int = 30
    epochs_solider: int = 10
    lr: float = 5e-4
    lr_solider: float = 5e-5
    # phase-2 rate boost for modules that start from scratch there (controllers
    # and the semantic head); the backbone keeps the plain fine-tuning rate
    lr_fresh_mult: float = 300.0
    lr_min: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # augmentation
    crop_scale_min: float = 0.6
    crop_scale_max: float = 1.0
    hflip_prob: float = 0.5
    color_jitter: float = 0.2

    def validate(self) -> "RunConfig":
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0,1], got {self.alpha}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.parts < 1:
            raise ConfigError("parts must be >= 1")
        if self.lr <= 0 or self.lr_solider <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lr_fresh_mult <= 0:
            raise ConfigError("lr_fresh_mult must be positive")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ConfigError("ema_momentum must be in [0,1)")
        return self


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for '{name}': {e}") from None


def parse_kv_text(text: str) -> dict:
    """Raw key -> string-value pairs; duplicate keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line.strip()!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        out[key] = value.strip()
    return out


def _build(cls, raw: dict, overrides: dict | None):
    kinds = {f.name: (type(f.default) if f.default is not dataclasses.MISSING else str)
             for f in fields(cls)}
    unknown = sorted(set(raw) - set(kinds))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {name: _coerce(name, value, kinds[name]) for name, value in raw.items()}
    for name, value in (overrides or {}).items():
        if value is None:
            continue
        if name not in kinds:
            raise ConfigError(f"unknown config key: {name}")
        values[name] = value if not isinstance(value, str) else _coerce(name, value, kinds[name])
    return cls(**values)


def load_run_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = parse_kv_text(fh.read())
    cfg = _build(RunConfig, raw, overrides)
    cfg.validate()
    return cfg


def load_synthetic_spec(path: str | None, overrides: dict | None = None) -> SyntheticSpec:
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = parse_kv_text(fh.read())
    spec = _build(SyntheticSpec, raw, overrides)
    spec.validate()
    return spec


def dump_config(cfg, version: str) -> str:
    """Resolved key=value text, one sorted key per line, version up top."""
    lines = [f"# solider {version}"]
    for f in sorted(fields(cfg), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"
