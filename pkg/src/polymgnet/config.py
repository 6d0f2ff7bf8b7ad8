"""Run configuration: one TOML file per experiment.

```toml
[arch]
family = "poly_q2"
channel_scale = 0.25

[train]
epochs = 20

[io]
dataset = "synthetic"

[mode]
smoke = true
```

Every key is optional.  Unknown keys and wrongly typed values are rejected
with their dotted path.  The digest is a hash of the fully resolved
configuration, so it does not depend on key order or on spelling out defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .network import ArchConfig
from .train import TrainConfig

__all__ = ["ConfigError", "IOConfig", "ModeConfig", "RunConfig", "SMOKE", "parse_config",
           "config_from_mapping"]

# smoke tier: 20 epochs at a quarter of the channels on a subset sized for one CPU
SMOKE = {"epochs": 20, "channel_scale": 0.25, "train_subset": 5000, "test_subset": 2000}
DATASETS = ("cifar10", "synthetic")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass
class IOConfig:
    data_root: str | None = None
    checkpoint_dir: str = "runs"
    report_dir: str = "reports"
    dataset: str = "cifar10"
    download: bool = False

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ValueError(f"dataset must be one of {DATASETS}")


@dataclass
class ModeConfig:
    smoke: bool = False
    deterministic: bool = True


@dataclass
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    io: IOConfig = field(default_factory=IOConfig)
    mode: ModeConfig = field(default_factory=ModeConfig)
    source: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"arch": self.arch.to_dict(), "train": self.train.to_dict(),
                "io": dataclasses.asdict(self.io), "mode": dataclasses.asdict(self.mode)}

    @property
    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


SECTIONS = {"arch": ArchConfig, "train": TrainConfig, "io": IOConfig, "mode": ModeConfig}


def _accepts(annotation, value) -> bool:
    """Loose runtime check of a TOML value against a dataclass annotation."""
    if annotation is Any:
        return True
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        return any(_accepts(a, value) for a in typing.get_args(annotation))
    if annotation is type(None):
        return value is None
    if origin is tuple or annotation is tuple:
        args = typing.get_args(annotation)
        return isinstance(value, list) and all(_accepts(args[0], v) for v in value) if args else True
    if annotation is bool:
        return isinstance(value, bool)
    if annotation is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if annotation is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if annotation is str:
        return isinstance(value, str)
    # placement: preset name, "U=bn,relu;R=bn" string, or a table of sites
    return isinstance(value, (str, dict))


def _build(cls, table: Mapping[str, Any], path: str):
    if not isinstance(table, Mapping):
        raise ConfigError(path, "expected a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for key, value in table.items():
        if key not in names:
            raise ConfigError(f"{path}.{key}", f"unknown key (allowed: {', '.join(sorted(names))})")
        if not _accepts(hints[key], value):
            raise ConfigError(f"{path}.{key}", f"expected {hints[key]}, got {type(value).__name__}")
    try:
        if cls is ArchConfig:
            return ArchConfig.from_dict(table)
        return cls(**table)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(path, str(exc)) from exc


def config_from_mapping(data: Mapping[str, Any], source: str | None = None) -> RunConfig:
    for key in data:
        if key not in SECTIONS:
            raise ConfigError(key, f"unknown section (allowed: {', '.join(SECTIONS)})")
    mode = _build(ModeConfig, data.get("mode", {}), "mode")
    arch_table = dict(data.get("arch", {}))
    train_table = dict(data.get("train", {}))
    if mode.smoke:
        arch_table.setdefault("channel_scale", SMOKE["channel_scale"])
        for key in ("epochs", "train_subset", "test_subset"):
            train_table.setdefault(key, SMOKE[key])
    return RunConfig(arch=_build(ArchConfig, arch_table, "arch"),
                     train=_build(TrainConfig, train_table, "train"),
                     io=_build(IOConfig, data.get("io", {}), "io"),
                     mode=mode, source=source)


def parse_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("", f"{path} is not valid TOML: {exc}") from exc
    return config_from_mapping(data, str(path))
