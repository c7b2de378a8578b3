"""Flat key=value run configuration.

One option per line, '#' comments, types inferred from the defaults below.
Unknown keys are fatal so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Dict, Optional

from ifwm.backbone import VARIANT_NAMES, NetworkSpec
from ifwm.errors import ConfigError


@dataclass
class TrainConfig:
    data_manifest: str = "data/manifest.tsv"
    val_fraction: float = 0.2
    tile: int = 64
    stem_channels: int = 16
    branch_widths: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    num_stages: int = 2
    num_classes: int = 4
    fusion: str = "ifwm"
    dtype: str = "f64"
    epochs: int = 40
    batch_size: int = 8
    lr: float = 0.01
    lr_decay: float = 0.9
    momentum: float = 0.9
    seed: int = 0
    augment: bool = True
    target_pa: float = 0.0
    target_miou: float = 0.0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.tile % 32:
            raise ConfigError(f"tile must be divisible by 32, got {self.tile}")
        for name in ("target_pa", "target_miou"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.fusion not in VARIANT_NAMES:
            raise ConfigError(f"unknown fusion variant {self.fusion!r}")
        self.network_spec().validate()

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(
            stem_channels=self.stem_channels,
            branch_widths=tuple(self.branch_widths),
            blocks_per_stage=self.blocks_per_stage,
            num_stages=self.num_stages,
            num_classes=self.num_classes,
            fusion=self.fusion,
            seed=self.seed,
            dtype=self.dtype,
        )


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for option {key}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, object]:
    defaults = {f.name: f.default for f in fields(TrainConfig)}
    out: Dict[str, object] = {}
    for ln, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{ln}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{source}:{ln}: unknown option {key!r}")
        out[key] = _parse_value(key, raw, defaults[key])
    return out


def load_config(path: Optional[str] = None, **overrides) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        with open(path) as fh:
            cfg = replace(cfg, **parse_config_text(fh.read(), source=path))
    known = {f.name for f in fields(TrainConfig)}
    for key in overrides:
        if key not in known:
            raise ConfigError(f"unknown option {key!r}")
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    cfg.validate()
    return cfg
