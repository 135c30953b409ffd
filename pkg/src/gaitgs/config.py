"""Flat ``section.key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Every key has a typed
default and unknown keys are rejected. Value syntax by type:

    int / float / str     plain literal
    bool                  true | false
    tuple of ints         comma list: ``16,16,32``
    lr schedule           ``iter:lr`` comma list: ``1200:1e-4,1800:1e-5``
    prior heads           ``name:classes`` comma list: ``view:4,condition:2``
"""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from .model import MODEL_PRESETS, ModelConfig
from .trainer import TRAIN_PRESETS, TrainConfig

log = logging.getLogger(__name__)

PRESETS = ("casia-b", "oumvlp", "grew", "desk")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = ""
    protocol: str = "synthetic"
    # training subjects; 0 = protocol default
    num_train: int = 0


@dataclass
class SynthConfig:
    subjects: int = 16
    views: tuple[int, ...] = (0, 30, 60, 90)
    conditions: tuple[str, ...] = ("none", "coat")
    seqs_per_cell: int = 2
    frames: int = 40
    seed: int = 7
    noise: float = 0.0


@dataclass
class EvalConfig:
    ranks: tuple[int, ...] = (1, 5, 10, 20)
    exclude_identical_view: bool = True


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def preset(cls, name: str) -> "RunConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})")
        data = DataConfig(protocol="casia-b" if name == "casia-b" else "synthetic")
        return cls(data=data, model=dataclasses.replace(MODEL_PRESETS[name]),
                   train=dataclasses.replace(TRAIN_PRESETS[name]))

    def sections(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def get(self, key: str):
        section, name = _split(self, key)
        return getattr(section, name)

    def set(self, key: str, text: str) -> None:
        """Parse ``text`` against the key's type and assign it, re-validating the section."""
        section, name = _split(self, key)
        value = parse_value(getattr(section, name), text, key)
        sec_name = key.split(".", 1)[0]
        try:
            new = dataclasses.replace(section, **{name: value})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key}: {e}") from e
        setattr(self, sec_name, new)

    def update(self, items: dict[str, str], source: str = "override") -> None:
        for key, text in items.items():
            before = format_value(self.get(key))
            self.set(key, text)
            after = format_value(self.get(key))
            if before != after:
                log.info("%s: %s = %s (was %s)", source, key, after, before)

    def dumps(self) -> str:
        lines = []
        for sec, obj in self.sections().items():
            for f in dataclasses.fields(obj):
                lines.append(f"{sec}.{f.name} = {format_value(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def write_beside(self, checkpoint: str | os.PathLike) -> Path:
        """Write ``<checkpoint>.cfg``."""
        return self.write(str(checkpoint) + ".cfg")

    def write(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def _split(cfg: RunConfig, key: str):
    if key.count(".") != 1:
        raise ConfigError(f"unknown config key {key!r} (expected section.name)")
    sec, name = key.split(".")
    sections = cfg.sections()
    if sec not in sections or name not in {f.name for f in dataclasses.fields(sections[sec])}:
        raise ConfigError(f"unknown config key {key!r}")
    return sections[sec], name


def _pairs(text: str) -> list[tuple[str, str]]:
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        if ":" not in item:
            raise ValueError(f"expected a:b, got {item!r}")
        a, b = item.split(":", 1)
        out.append((a.strip(), b.strip()))
    return out


def parse_value(current, text: str, key: str = "value"):
    text = text.strip()
    try:
        if isinstance(current, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(f"expected true/false, got {text!r}")
            return text.lower() == "true"
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, str):
            return text
        if isinstance(current, dict):
            return {k: int(v) for k, v in _pairs(text)}
        if isinstance(current, list):  # lr schedule
            return [(int(a), float(b)) for a, b in _pairs(text)]
        if isinstance(current, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            if key.endswith("conditions"):
                return tuple(items)
            if key.endswith("betas"):
                return tuple(float(s) for s in items)
            return tuple(int(s) for s in items)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e
    raise ConfigError(f"{key}: unsupported type {type(current).__name__}")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, dict):
        return ",".join(f"{k}:{n}" for k, n in v.items())
    if isinstance(v, list):
        return ",".join(f"{a}:{b!r}" for a, b in v)
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    items: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in items:
            raise ConfigError(f"{source}:{n}: duplicate key {k!r}")
        items[k] = v
    return items


def load_config(path: str | os.PathLike | None = None, preset: str | None = None,
                overrides: dict[str, str] | None = None) -> RunConfig:
    """defaults < preset < file < overrides; each change past the file is logged."""
    cfg = RunConfig.preset(preset) if preset else RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        cfg.update(parse_text(text, str(path)), source=str(path))
    if overrides:
        cfg.update(overrides, source="flag")
    return cfg
