"""Run configuration as a sectioned ``key = value`` text file."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

from .experiment import SuiteConfig
from .graph import EdgePolicy
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def parse_grid(text: str) -> Tuple[int, int, int]:
    """'HxWxD' -> (D, H, W)."""
    try:
        h, w, d = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise ConfigError(f"grid must look like HxWxD, got {text!r}") from None
    if min(h, w, d) < 1:
        raise ConfigError(f"grid entries must be positive, got {text!r}")
    return (d, h, w)


def format_grid(grid) -> str:
    d, h, w = grid
    return f"{h}x{w}x{d}"


@dataclass
class SampleConfig:
    seeds: Tuple[int, ...] = (0,)
    mode: str = "vote"  # or "average"
    postprocess: bool = True
    batch_size: int = 16
    graph: str = "full"  # or "empty"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.mode not in ("vote", "average"):
            raise ValueError("mode must be 'vote' or 'average'")
        if self.graph not in ("full", "empty"):
            raise ValueError("graph must be 'full' or 'empty'")
        if self.batch_size < 0:
            raise ValueError("batch_size must be non-negative")


@dataclass
class GraphConfig:
    neighborhood: int = 1
    threshold: float = 0.0  # 0 = derive from the sub-volume size
    threshold_pitches: float = 3.0
    background_speed: float = 1e-3

    def policy(self, spacing=(1.0, 1.0, 1.0)) -> EdgePolicy:
        return EdgePolicy(self.neighborhood, self.threshold or None, self.threshold_pitches,
                          self.background_speed, tuple(spacing))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SuiteConfig = field(default_factory=SuiteConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)

    def __post_init__(self):
        self.train.model = self.model

    def as_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            d.pop("model", None)
            out[name] = d
        return out

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()


SECTIONS = ("model", "train", "data", "sample", "graph")
_TYPES = {"model": ModelConfig, "train": TrainConfig, "data": SuiteConfig, "sample": SampleConfig,
          "graph": GraphConfig}


def _format(name: str, value) -> str:
    if name == "node_grid":
        return format_grid(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(section: str, name: str, text: str, default):
    text = text.strip()
    if name == "node_grid":
        return parse_grid(text)
    if name in ("merge_levels", "graph_levels"):
        return None if text.lower() == "none" else tuple(int(v) for v in text.split(",") if v.strip())
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "on", "yes", "1"):
            return True
        if low in ("false", "off", "no", "0"):
            return False
        raise ConfigError(f"[{section}] {name}: expected a boolean, got {text!r}")
    try:
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {name}: cannot parse {text!r}") from None
    return text


def config_from_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive (T)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    parts = {}
    for section, cls in _TYPES.items():
        defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls) if f.name != "model"}
        values = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in defaults:
                    raise ConfigError(f"[{section}] unknown key {key!r}")
                values[key] = _parse(section, key, raw, defaults[key])
        try:
            parts[section] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from None
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return config_from_text(path.read_text())


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for section, values in cfg.as_dict().items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_format(k, getattr(getattr(cfg, section), k))}" for k in values)
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(config_to_text(cfg))


def desk_config(iterations: int = 10_000, tier: str = "ABC") -> RunConfig:
    """Small widths and an 8x8x3 node grid for 64x64 phantom slices on a CPU."""
    model = ModelConfig(tier=tier, image_size=64, base_width=8, cond_width=4, temb_dim=32,
                        node_grid=(3, 8, 8), node_dim=16, attn_dim=16)
    return RunConfig(model=model, train=TrainConfig(iterations=iterations, log_every=10, model=model))
