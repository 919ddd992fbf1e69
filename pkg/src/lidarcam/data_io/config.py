"""Run configuration: nested dataclasses loaded from YAML with strict keys."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from ..bev_grid import BEVGrid
from ..geometry import NoiseSpec
from ..ggbd import SELECTOR_MODES
from ..losses import LossWeights


class ConfigError(ValueError):
    """Parse or validation failure; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class DepthConfig:
    d_min: float = 1.0
    d_max: Optional[float] = None  # defaults to grid.range
    bins: int = 32


@dataclass(frozen=True)
class ModelConfig:
    n_l: int = 16
    n_c: int = 32
    n_b: int = 64
    voxel_hidden: int = 16
    voxel_layers: int = 2
    image_hidden: int = 16
    attn_layers: int = 2
    heads: int = 4
    selector: str = "geometry"
    bev_height_filter: bool = True


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 5e-5
    weight_decay: float = 1e-4
    step_size: int = 100  # epochs between lr decays
    gamma: float = 0.5


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 500
    max_steps: Optional[int] = None
    seed: int = 0
    noise_pool: int = 0  # 0: fresh noise every step; k: k fixed draws per scene
    max_points: int = 8192
    log_every: int = 1


@dataclass(frozen=True)
class DataConfig:
    train: tuple[str, ...] = ("00",)
    test: tuple[str, ...] = ("01",)


@dataclass(frozen=True)
class RunConfig:
    grid: BEVGrid = field(default_factory=BEVGrid)
    depth: DepthConfig = field(default_factory=DepthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def d_max(self) -> float:
        return self.depth.d_max if self.depth.d_max is not None else self.grid.range

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def replace(self, **sections) -> "RunConfig":
        """Shallow per-section override, e.g. ``cfg.replace(train={"seed": 3})``."""
        data = self.to_dict()
        for key, value in sections.items():
            data[key].update(value)
        return config_from_dict(data)


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(value: Any, tp: Any, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
        return _coerce(value, tp, path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Any, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(path or cls.__name__, str(exc)) from exc


def _check(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def validate(cfg: RunConfig) -> RunConfig:
    g, d, m, t = cfg.grid, cfg.depth, cfg.model, cfg.train
    _check(g.x_cells % 4 == 0, "grid.x_cells", f"{g.x_cells} is not divisible by 4 (FPN depth 3)")
    _check(g.y_cells % 4 == 0, "grid.y_cells", f"{g.y_cells} is not divisible by 4 (FPN depth 3)")
    _check(d.bins >= 2, "depth.bins", "need at least 2 depth bins")
    _check(d.d_min > 0, "depth.d_min", "must be > 0")
    _check(cfg.d_max > d.d_min, "depth.d_max", "must exceed depth.d_min")
    for name in ("n_l", "n_c", "n_b", "voxel_hidden", "image_hidden", "heads"):
        _check(getattr(m, name) >= 1, f"model.{name}", "must be >= 1")
    _check(m.voxel_layers >= 1, "model.voxel_layers", "must be >= 1")
    _check(m.attn_layers >= 1, "model.attn_layers", "must be >= 1")
    _check(m.n_b % 4 == 0, "model.n_b", "must be divisible by 4 (sinusoidal embedding)")
    _check(m.n_b % m.heads == 0, "model.n_b", "must be divisible by model.heads")
    _check(m.selector in SELECTOR_MODES, "model.selector", f"must be one of {SELECTOR_MODES}")
    _check(cfg.optim.lr > 0, "optim.lr", "must be > 0")
    _check(cfg.optim.weight_decay >= 0, "optim.weight_decay", "must be >= 0")
    _check(cfg.optim.step_size >= 1, "optim.step_size", "must be >= 1")
    _check(0 < cfg.optim.gamma <= 1, "optim.gamma", "must be in (0, 1]")
    _check(t.batch_size >= 1, "train.batch_size", "must be >= 1")
    _check(t.epochs >= 1, "train.epochs", "must be >= 1")
    _check(t.max_steps is None or t.max_steps >= 1, "train.max_steps", "must be >= 1")
    _check(t.noise_pool >= 0, "train.noise_pool", "must be >= 0")
    _check(t.max_points >= 1, "train.max_points", "must be >= 1")
    return cfg


def config_from_dict(data: Optional[dict]) -> RunConfig:
    return validate(_build(RunConfig, data or {}, ""))


def load_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
