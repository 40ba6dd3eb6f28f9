"""INI run configuration: ``key = value`` pairs grouped in sections.

Unset keys fall back to the dataclass defaults, so an empty file is a
valid configuration.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import SplitSpec, SyntheticConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    observations: str = ""
    stations: str = ""
    stride: int = 0  # 0: non-overlapping training windows
    delta: float = 0.1
    gamma: float = 0.0  # 0: standard deviation of the normalized distances


@dataclass(frozen=True)
class SimulateConfig:
    n_stations: int = 36
    hours: int = 2000


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    knn: int = 5


SECTIONS = ("data", "split", "model", "train", "synthetic", "simulate")


def _parse_value(raw: str, current, where: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            kind = type(current[0]) if current else float
            return tuple(kind(p) for p in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(current).__name__}") from None


def _fill(obj, section: dict[str, str], name: str):
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        updates[key] = _parse_value(raw, getattr(obj, key), f"[{name}] {key}")
    try:
        return dataclasses.replace(obj, **updates)
    except ValueError as exc:  # dataclass validation (ParameterError is a ValueError)
        raise ConfigError(f"[{name}] {exc}") from None


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig()
    parts = {}
    for name in parser.sections():
        if name not in SECTIONS and name != "evaluate":
            raise ConfigError(f"{source}: unknown section [{name}]")
    for name in SECTIONS:
        current = getattr(cfg, name)
        parts[name] = _fill(current, dict(parser[name]), name) if parser.has_section(name) else current
    knn = cfg.knn
    if parser.has_section("evaluate"):
        extra = set(parser["evaluate"]) - {"knn"}
        if extra:
            raise ConfigError(f"[evaluate] unknown key {sorted(extra)[0]!r}")
        knn = _parse_value(parser["evaluate"].get("knn", str(knn)), knn, "[evaluate] knn")
    return RunConfig(knn=knn, **parts)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def dump_config(cfg: RunConfig) -> str:
    """Render every setting; ``parse_config(dump_config(c)) == c``."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for f in fields(getattr(cfg, name)):
            v = getattr(getattr(cfg, name), f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    lines += ["[evaluate]", f"knn = {cfg.knn}", ""]
    return "\n".join(lines)


def override(cfg: RunConfig, **flags) -> RunConfig:
    """Apply command-line overrides (``None`` means unset)."""
    train, model = cfg.train, cfg.model
    try:
        if flags.get("seed") is not None:
            train = dataclasses.replace(train, seed=flags["seed"])
        if flags.get("alpha") is not None:
            train = dataclasses.replace(train, alpha=flags["alpha"])
        if flags.get("beta") is not None:
            train = dataclasses.replace(train, beta=flags["beta"])
        if flags.get("diffusion_k") is not None:
            model = dataclasses.replace(model, diffusion_k=flags["diffusion_k"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    knn = flags["knn"] if flags.get("knn") is not None else cfg.knn
    return dataclasses.replace(cfg, train=train, model=model, knn=knn)
