"""Line-oriented ``key = value`` run configuration.

Keys are dotted (``model.d``, ``train.r``, ``synth.n_contents.target``).
Blank lines and ``#`` comments are ignored. Precedence, lowest first:
built-in defaults, config file, command-line flags.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .data import DEFAULT_TYPES, SyntheticConfig
from .model import ConfigError, ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    types: tuple = DEFAULT_TYPES
    split_day: int = 9


@dataclass
class EvalConfig:
    k: int = 50
    auc_negatives: int = 50


@dataclass
class AblateConfig:
    seeds: list = field(default_factory=list)
    baseline: str = "ttm"


@dataclass
class RunConfig:
    seed: int = 0
    synth: SyntheticConfig = field(default_factory=SyntheticConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def validate(self):
        self.model.types = tuple(self.data.types)
        self.model.validate()
        self.train.seed = self.seed
        self.train.validate()
        self.synth.validate()
        if self.eval.k < 1:
            raise ConfigError("eval.k must be >= 1")
        if self.eval.auc_negatives < 1:
            raise ConfigError("eval.auc_negatives must be >= 1")
        return self


_SECTIONS = ("synth", "data", "model", "train", "eval", "ablate")


def _coerce(raw, current, key):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(current, int):
            return int(raw.replace("_", ""))
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, (list, tuple)):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            sample = current[0] if current else None
            if isinstance(sample, int) or key in ("model.mrl_hidden", "ablate.seeds"):
                items = [int(x) for x in items]
            return type(current)(items)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None


def apply_setting(cfg, key, raw):
    """Set one dotted key from its text value; unknown keys raise ``ConfigError``."""
    parts = key.strip().split(".")
    if parts == ["seed"]:
        cfg.seed = _coerce(raw, cfg.seed, key)
        return
    if len(parts) < 2 or parts[0] not in _SECTIONS:
        raise ConfigError(f"unknown config key {key!r}")
    section = getattr(cfg, parts[0])
    names = {f.name for f in dataclasses.fields(section)}
    if parts[1] not in names:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(section, parts[1])
    if isinstance(current, dict):
        if len(parts) != 3:
            raise ConfigError(f"{key!r} needs a sub-key, e.g. {key}.target")
        sample = next(iter(current.values()), 0)
        current[parts[2]] = _coerce(raw, sample, key)
        return
    if len(parts) != 2:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(section, parts[1], _coerce(raw, current, key))


def parse_config_text(text, cfg=None, source="<config>"):
    cfg = cfg or RunConfig()
    dict_touched = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        key = key.strip()
        parts = key.split(".")
        # a dict-valued key named in the file replaces the default mapping
        if len(parts) == 3 and (parts[0], parts[1]) not in dict_touched and parts[0] in _SECTIONS:
            section = getattr(cfg, parts[0])
            if isinstance(getattr(section, parts[1], None), dict):
                getattr(section, parts[1]).clear()
                dict_touched.add((parts[0], parts[1]))
        try:
            apply_setting(cfg, key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return cfg


def load_config(path=None):
    cfg = RunConfig()
    if path:
        with open(path, encoding="utf-8") as fh:
            parse_config_text(fh.read(), cfg, path)
    return cfg
