"""Run configuration: nested dataclasses with published defaults, YAML on disk, stable hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    in_channels: int = 1
    channels: tuple[int, ...] = (16, 32, 64, 64, 64)
    taps: tuple[int, int] = (2, 4)
    tap_norm: bool = True


@dataclass
class DescriptorConfig:
    n: int = 7
    w: int = 5
    sigma: float | None = None  # None: n / 4
    d_s: float = 0.5
    exclusion: bool = True
    pooling: str = "glpool"  # or "points"


@dataclass
class GraphConfig:
    layers: int = 3
    width: int = 128
    score_dim: int = 32
    strict_mutual: bool = True
    learn_graph: bool = True
    c_scale: float = 10.0  # initial C = c_scale * I on unit-norm embeddings


@dataclass
class TransportConfig:
    delta: float = 0.5
    max_iters: int = 100
    tol: float = 1e-6
    score_floor: float = 0.2


@dataclass
class LossSection:
    s3: float = 30.0
    s5: float = 5.0
    eta3: float = 0.5
    eta5: float = 0.2
    lam: float = 0.5


@dataclass
class TrainSection:
    lr: float = 1e-3
    lr_decay: float = 10.0
    lr_floor: float = 1e-6
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0
    augment: bool = True
    aug_rotation: float = 10.0  # degrees, uniform in [-x, x]
    aug_scale: tuple[float, float] = (0.9, 1.1)


@dataclass
class DataSection:
    size: int = 128
    max_rotation: float = 15.0
    max_translation: float = 0.08
    scale_range: tuple[float, float] = (0.85, 1.15)
    max_perspective: float = 4e-4
    ratio_range: tuple[float, float] = (0.5, 1.5)
    fragment_prob: float = 0.3
    min_matches: int = 5
    max_overlap: float = 0.9
    angle_thresh: float = 5.0
    overlap_thresh: float = 0.5


@dataclass
class Config:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict | None) -> "Config":
        return _build(cls, d or {}, "")

    def override(self, dotted: dict) -> "Config":
        """Copy with ``{"section.key": value}`` overrides applied."""
        d = self.to_dict()
        for key, value in dotted.items():
            section, _, name = key.partition(".")
            if section not in d or name not in d[section]:
                raise ConfigError(f"unknown config key {key!r}")
            d[section][name] = value
        return Config.from_dict(d)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {}
    for name, value in d.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        elif isinstance(default, tuple) and value is not None:
            kwargs[name] = tuple(_coerce(v, type(default[0]), f"{prefix}{name}") for v in value)
        elif default is None or value is None:
            kwargs[name] = value if value is None or isinstance(value, str) else _coerce(value, float, prefix + name)
        else:
            kwargs[name] = _coerce(value, type(default), prefix + name)
    return cls(**kwargs)


def _coerce(value, kind, key):
    # YAML reads 1e-3 (no dot) as a string and users write 1 for 1.0
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is str:
        if isinstance(value, str):
            return value
    elif not isinstance(value, bool):
        try:
            out = kind(value)
        except (TypeError, ValueError):
            pass
        else:
            if kind is not int or out == float(value):
                return out
    raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    data = yaml.safe_load(Path(path).read_text()) or {}
    return Config.from_dict(data)
