"""Plain-text ``key = value`` run configuration.

Training, model and I/O settings share one flat namespace. Unknown keys
are rejected by name so that typos fail before any work starts.
"""

from dataclasses import dataclass, field, fields
from pathlib import Path

from .network import ModelConfig, _coerce
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class IOConfig:
    dataset: str = ""
    patch_size: int = 256
    coverage: float = 1.0
    num_pairs: int = 0
    checkpoint: str = "model.smog"
    log: str = "train_log.csv"
    resume: str = ""
    figures: str = ""


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    io: IOConfig = field(default_factory=IOConfig)


_SECTIONS = (("train", TrainConfig), ("model", ModelConfig), ("io", IOConfig))
# model.seed would shadow train.seed; the model init seed gets its own key
_RENAMED = {("model", "seed"): "init_seed"}


def known_keys():
    keys = {}
    for section, cls in _SECTIONS:
        for f in fields(cls):
            keys[_RENAMED.get((section, f.name), f.name)] = (section, f.name, f.type)
    return keys


def parse_lines(lines, source="<config>"):
    """``key = value`` pairs in file order; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, val = text.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        out[key] = val.strip()
    return out


def build(values, source="<config>"):
    """RunConfig from a ``key -> value`` mapping (strings or typed values)."""
    keys = known_keys()
    buckets = {name: {} for name, _ in _SECTIONS}
    for key, val in values.items():
        if key not in keys:
            raise ConfigError(f"{source}: unknown config key '{key}'")
        section, name, kind = keys[key]
        try:
            buckets[section][name] = _coerce(val, kind)
        except ValueError:
            raise ConfigError(f"{source}: bad value for '{key}': {val!r}") from None
    try:
        return RunConfig(TrainConfig(**buckets["train"]), ModelConfig(**buckets["model"]),
                         IOConfig(**buckets["io"]))
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load(path, overrides=None):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = parse_lines(path.read_text().splitlines(), str(path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = build(values, str(path))
    base = path.parent
    # relative paths in a config file are relative to the file
    for name in ("dataset", "checkpoint", "log", "resume", "figures"):
        val = getattr(cfg.io, name)
        if val and not Path(val).is_absolute():
            setattr(cfg.io, name, str(base / val))
    return cfg


def dump(cfg):
    lines = []
    for key, (section, name, _) in known_keys().items():
        lines.append(f"{key} = {getattr(getattr(cfg, section), name)}")
    return "\n".join(lines) + "\n"
