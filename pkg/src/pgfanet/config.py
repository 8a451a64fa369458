"""Run configuration: INI file + command-line overrides.

Grammar: a standard INI document with up to four sections. Every key is
optional and falls back to the library default::

    [model]     ModelConfig fields      (stage_widths = 16, 32, 64, 64)
    [train]     TrainConfig fields      (ema_decay = 0.99)
    [data]      SynthConfig fields      (instances_per_image = 6, 12)
    [run]       RunSection fields       (out_dir = runs/exp1)

Tuples are comma separated, booleans accept true/false/yes/no/1/0 and
optional values accept ``none``.  Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import os
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .data import SynthConfig
from .model import ConfigError, ModelConfig
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "PGFANET_OUTPUT_ROOT"
GLAND_RAMPUP_K = 5.0


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


@dataclass
class RunSection:
    mode: str = "nuclei"                 # nuclei | gland
    out_dir: Optional[str] = None        # defaults to $PGFANET_OUTPUT_ROOT/<command>
    data_dir: Optional[str] = None
    val_dir: Optional[str] = None
    label_fraction: float = 1.0
    split_seed: int = 0
    checkpoint: Optional[str] = None
    which: str = "student"               # student | teacher

    def validate(self) -> "RunSection":
        if self.mode not in ("nuclei", "gland"):
            raise ConfigError("run.mode", "must be 'nuclei' or 'gland'")
        if not 0 < self.label_fraction <= 1:
            raise ConfigError("run.label_fraction", "must be in (0, 1]")
        if self.which not in ("student", "teacher"):
            raise ConfigError("run.which", "must be 'student' or 'teacher'")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    run: RunSection = field(default_factory=RunSection)

    @property
    def metric_mode(self) -> str:
        return self.run.mode

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        try:
            self.data.validate()
        except ValueError as e:
            raise ConfigError("data", str(e)) from e
        self.run.validate()
        return self

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            obj = getattr(self, name)
            out[name] = {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
        return out


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": SynthConfig, "run": RunSection}


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _field_types(cls) -> Dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(key: str, raw: Any, tp: Any) -> Any:
    """Convert ``raw`` (usually a string) to the annotated type ``tp``."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if isinstance(raw, str) and raw.strip().lower() in ("none", ""):
            return None
        if raw is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return coerce(key, raw, inner)
    if origin in (tuple, Tuple):
        items = raw if isinstance(raw, (list, tuple)) else [x for x in str(raw).split(",") if x.strip()]
        elem = args[0] if args else str
        return tuple(coerce(key, x, elem) for x in items)
    if not isinstance(raw, str):
        if tp is float and isinstance(raw, (int, float)) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, tp):
            return raw
        raise ConfigError(key, f"expected {tp.__name__}, got {raw!r}")
    text = raw.strip()
    if tp is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(key, f"expected a boolean, got {text!r}")
    if tp in (int, float):
        try:
            return tp(text)
        except ValueError:
            raise ConfigError(key, f"expected {tp.__name__}, got {text!r}") from None
    return text


def _apply(obj, section: str, values: Mapping[str, Any]):
    types = _field_types(type(obj))
    updates = {}
    for key, raw in values.items():
        if key not in types:
            valid = ", ".join(sorted(types))
            raise ConfigError(f"{section}.{key}", f"unknown key; valid keys: {valid}")
        updates[key] = coerce(f"{section}.{key}", raw, types[key])
    return replace(obj, **updates)


def read_ini(path) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as e:
        raise ConfigError(str(path), f"malformed configuration file: {e}") from e
    except OSError as e:
        raise ConfigError(str(path), f"cannot read configuration file: {e}") from e
    out = {}
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(sec, f"unknown section; valid sections: {', '.join(SECTIONS)}")
        out[sec] = dict(parser.items(sec))
    return out


def parse_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Build a validated RunConfig from an optional INI file and dotted overrides.

    ``overrides`` maps ``"section.key"`` to a value (string or already typed);
    they are applied after the file, so they always win.
    """
    file_values = read_ini(path) if path is not None else {}
    merged: Dict[str, Dict[str, Any]] = {s: dict(file_values.get(s, {})) for s in SECTIONS}
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(dotted, "override keys must look like section.key")
        sec, key = dotted.split(".", 1)
        if sec not in SECTIONS:
            raise ConfigError(dotted, f"unknown section; valid sections: {', '.join(SECTIONS)}")
        merged[sec][key] = value

    cfg = RunConfig()
    cfg.run = _apply(cfg.run, "run", merged["run"])
    data_values = dict(merged["data"])
    if cfg.run.mode == "gland":
        cfg.data = SynthConfig.gland()
    data_values.setdefault("mode", cfg.run.mode)
    cfg.data = _apply(cfg.data, "data", data_values)
    cfg.model = _apply(cfg.model, "model", merged["model"])
    train_values = dict(merged["train"])
    if cfg.run.mode == "gland":
        train_values.setdefault("rampup_k", GLAND_RAMPUP_K)
    cfg.train = _apply(cfg.train, "train", train_values)
    return cfg.validate()


def write_ini(cfg: RunConfig, path) -> Path:
    parser = configparser.ConfigParser(interpolation=None)
    for sec, values in cfg.to_dict().items():
        parser[sec] = {k: _ini_value(v) for k, v in values.items()}
    path = Path(path)
    with open(path, "w") as fh:
        parser.write(fh)
    return path


def _ini_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, list):
        return ", ".join(str(x) for x in v)
    return str(v).lower() if isinstance(v, bool) else str(v)
