"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .data import AugmentPolicy
from .model import BackboneConfig, FerConfig
from .optim import TrainConfig


class ConfigError(ValueError):
    pass


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}
_CHOICES = {
    "backbone": ("desk", "paper"),
    "sampler": ("imbalanced", "shuffle"),
    "rebalance": ("none", "oversample", "undersample"),
}
_PATH_KEYS = ("train_manifest", "val_manifest", "out_dir")


@dataclass
class RunConfig:
    seed: int = 0
    input_size: int = 0  # 0 -> preset default
    backbone: str = "desk"
    grid_rows: int = 5
    grid_cols: int = 5
    k: int = 4
    lam: float = 0.2
    eca_k: int = 0  # 0 -> adaptive
    epochs: int = 20
    batch_size: int = 64
    lr_backbone: float = 1e-4
    lr_heads: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    lr_decay: float = 0.95
    augment: bool = True
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.3
    saturation: float = 0.25
    hue: float = 0.05
    sampler: str = "imbalanced"
    rebalance: str = "none"
    rebalance_cap: int = 0  # 0 -> uncapped
    train_manifest: str = ""
    val_manifest: str = ""
    out_dir: str = "run"

    # -- derived objects ----------------------------------------------------
    def backbone_config(self) -> BackboneConfig:
        preset = BackboneConfig.preset(self.backbone)
        if self.input_size in (0, preset.input_size):
            return preset
        return BackboneConfig(preset.stages, preset.tap_u, preset.tap_l, self.input_size)

    def fer_config(self) -> FerConfig:
        side = math.isqrt(self.k)
        return FerConfig(
            backbone=self.backbone_config(),
            grid=(self.grid_rows, self.grid_cols),
            cci_grid=(side, side),
            lam=self.lam,
            eca_k=self.eca_k or None,
        )

    def augment_policy(self) -> AugmentPolicy | None:
        if not self.augment:
            return None
        return AugmentPolicy(self.flip_prob, self.brightness, self.contrast, self.saturation, self.hue)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr_backbone, self.lr_heads, self.momentum,
                           self.weight_decay, self.lr_decay, self.sampler, self.augment_policy(), self.seed)

    def validate(self) -> "RunConfig":
        for key, allowed in _CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}, got {getattr(self, key)!r}")
        side = math.isqrt(self.k) if self.k > 0 else 0
        if self.k < 1 or side * side != self.k:
            raise ConfigError(f"k must be a positive perfect square (square CCI grid), got {self.k}")
        if self.epochs < 0 or self.batch_size < 1 or self.rebalance_cap < 0 or self.input_size < 0:
            raise ConfigError("epochs, batch_size, rebalance_cap and input_size must be non-negative (batch_size >= 1)")
        if self.eca_k < 0 or (self.eca_k and self.eca_k % 2 == 0):
            raise ConfigError("eca_k must be 0 (adaptive) or a positive odd int")
        try:
            self.fer_config()
            self.train_config().make_state()
            self.augment_policy()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    # -- text form --------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            key = "lambda" if f.name == "lam" else f.name
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, kind, raw: str, where: str):
    if kind == "bool":
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{where}: {name} expects a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError
            return value
    except ValueError:
        raise ConfigError(f"{where}: {name} expects {kind}, got {raw!r}") from None
    return raw


def parse_config(text: str, base_dir: str | os.PathLike | None = None, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines (``#`` comments). Unknown or repeated keys are errors.

    Relative manifest/output paths are resolved against ``base_dir``.
    """
    types = {f.name: f.type for f in fields(RunConfig)}
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        name = "lam" if key == "lambda" else key
        if name not in types or key == "lam":
            raise ConfigError(f"{where}: unknown key {key!r}")
        if name in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        values[name] = _coerce(key, types[name], value, where)
    if base_dir is not None:
        for key in _PATH_KEYS:
            if values.get(key):
                values[key] = str(Path(base_dir) / str(values[key]))
    return RunConfig(**values).validate()


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not valid UTF-8") from None
    return parse_config(text, base_dir=path.parent, source=str(path))
