"""Flat ``key=value`` run configuration.

Keys are ``section.name``; ``#`` starts a comment.  Unknown keys, bad values
and cross-field inconsistencies raise :class:`ConfigError` naming the key and
the line (``<cli>`` for command-line overrides).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

from .dataio import TIERS
from .trainer import TrainPlan, default_dropout

REDUCED_CHANNELS = (16, 32, 64, 128, 128)
DEFAULT_DATA = "synth:0,500,4,32"


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | str | None = None):
        where = ""
        if key is not None:
            where = f"{key}"
            if line is not None:
                where += f" (line {line})"
            where += ": "
        super().__init__(where + message)
        self.key = key
        self.line = line


def default_channels(blocks: int) -> tuple[int, ...]:
    return tuple(REDUCED_CHANNELS[min(b, len(REDUCED_CHANNELS) - 1)] for b in range(blocks))


@dataclass
class ArchConfig:
    columns: int = 3
    blocks: int = 2
    channels: tuple[int, ...] | None = None
    classes: int | None = None
    pool_flip: bool = True

    def channel_plan(self) -> tuple[int, ...]:
        return default_channels(self.blocks) if self.channels is None else self.channels


@dataclass
class DataConfig:
    source: str = DEFAULT_DATA
    test: str | None = None


@dataclass
class OutputConfig:
    metrics: str | None = None
    checkpoint: str = "fractal.ckpt"
    checkpoint_every: int = 0


@dataclass
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainPlan = field(default_factory=TrainPlan)
    data: DataConfig = field(default_factory=DataConfig)
    out: OutputConfig = field(default_factory=OutputConfig)

    def to_text(self) -> str:
        """Serialize every key; parsing the result reproduces this config."""
        lines = []
        for key, (section, attr, _, fmt) in KEYS.items():
            value = getattr(getattr(self, section), attr)
            lines.append(f"{key}={fmt(value)}")
        return "\n".join(lines) + "\n"


# -- value parsers -------------------------------------------------------------

def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt(parse: Callable[[str], object]) -> Callable[[str], object]:
    def inner(s: str):
        return None if s.strip() in ("", "none", "auto") else parse(s)
    return inner


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (section, attribute, parser, formatter)
KEYS: dict[str, tuple[str, str, Callable, Callable]] = {
    "arch.columns": ("arch", "columns", int, _fmt),
    "arch.blocks": ("arch", "blocks", int, _fmt),
    "arch.channels": ("arch", "channels", _opt(_ints), _fmt),
    "arch.classes": ("arch", "classes", _opt(int), _fmt),
    "arch.pool_flip": ("arch", "pool_flip", _bool, _fmt),
    "train.epochs": ("train", "epochs", int, _fmt),
    "train.batch_size": ("train", "batch_size", int, _fmt),
    "train.lr": ("train", "base_lr", float, _fmt),
    "train.momentum": ("train", "momentum", float, _fmt),
    "train.milestones": ("train", "milestones", _opt(_ints), _fmt),
    "train.droppath": ("train", "droppath", _bool, _fmt),
    "train.local_drop_rate": ("train", "local_drop_rate", float, _fmt),
    "train.local_fraction": ("train", "local_fraction", float, _fmt),
    "train.dropout": ("train", "dropout", _opt(_floats), _fmt),
    "train.seed": ("train", "seed", int, _fmt),
    "train.precision": ("train", "precision", str, _fmt),
    "train.simultaneous": ("train", "simultaneous", _bool, _fmt),
    "train.weight_decay": ("train", "weight_decay", float, _fmt),
    "train.monitor": ("train", "monitor", _bool, _fmt),
    "train.record_time": ("train", "record_time", _bool, _fmt),
    "data.source": ("data", "source", str, _fmt),
    "data.test": ("data", "test", _opt(str), _fmt),
    "data.augment": ("train", "augment", str, _fmt),
    "out.metrics": ("out", "metrics", _opt(str), _fmt),
    "out.checkpoint": ("out", "checkpoint", str, _fmt),
    "out.checkpoint_every": ("out", "checkpoint_every", int, _fmt),
}


def _split_line(raw: str, line: int | str) -> tuple[str, str] | None:
    text = raw.split("#", 1)[0].strip()
    if not text:
        return None
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}", None, line)
    key, value = (part.strip() for part in text.split("=", 1))
    return key, value


def _assign(cfg: RunConfig, key: str, value: str, line: int | str, seen: set[str]) -> None:
    if key not in KEYS:
        raise ConfigError("unknown key", key, line)
    section, attr, parse, _ = KEYS[key]
    try:
        parsed = parse(value)
    except ValueError as exc:
        raise ConfigError(f"bad value {value!r} ({exc})", key, line) from None
    setattr(getattr(cfg, section), attr, parsed)
    seen.add(key)


def parse_config(text: str | None = None, overrides: Iterable[str] = (),
                 env: dict[str, str] | None = None) -> RunConfig:
    """Build a validated config from file text plus ``key=value`` overrides (overrides win)."""
    cfg = RunConfig()
    seen: set[str] = set()
    if text:
        for no, raw in enumerate(text.splitlines(), start=1):
            kv = _split_line(raw, no)
            if kv:
                _assign(cfg, *kv, no, seen)
    for item in overrides:
        kv = _split_line(item, "<cli>")
        if kv:
            _assign(cfg, *kv, "<cli>", seen)
    env = os.environ if env is None else env
    if "train.seed" not in seen and env.get("FRACTAL_SEED"):
        try:
            cfg.train.seed = int(env["FRACTAL_SEED"])
        except ValueError:
            raise ConfigError("FRACTAL_SEED is not an integer", "train.seed", "<env>") from None
    validate(cfg)
    return cfg


def load_config(path: str | os.PathLike | None, overrides: Iterable[str] = ()) -> RunConfig:
    text = Path(path).read_text() if path else None
    return parse_config(text, overrides)


def data_shape(source: str) -> tuple[int, int, int]:
    """(channels, size, classes) implied by a data descriptor."""
    kind, _, rest = source.partition(":")
    if kind == "synth":
        seed, n, classes, size = parse_synth(rest)
        return 1, size, classes
    if kind == "idx":
        from .dataio import read_idx_images, read_idx_labels
        img, lbl = parse_idx(rest)
        images = read_idx_images(img)
        labels = read_idx_labels(lbl)
        return images.shape[1], images.shape[2], int(labels.max()) + 1 if len(labels) else 0
    raise ValueError(f"unknown data source kind {kind!r}")


def parse_synth(rest: str) -> tuple[int, int, int, int]:
    parts = [p.strip() for p in rest.split(",")]
    if len(parts) != 4:
        raise ValueError("synth source needs seed,n,classes,size")
    seed, n, classes, size = (int(p) for p in parts)
    if n < 1 or classes < 2 or size < 2:
        raise ValueError("synth source needs n >= 1, classes >= 2, size >= 2")
    return seed, n, classes, size


def parse_idx(rest: str) -> tuple[str, str]:
    parts = [p.strip() for p in rest.split(",")]
    if len(parts) != 2 or not all(parts):
        raise ValueError("idx source needs <images>,<labels>")
    return parts[0], parts[1]


def validate(cfg: RunConfig) -> None:
    a, t = cfg.arch, cfg.train
    if not 1 <= a.columns <= 12:
        raise ConfigError("must be in [1, 12]", "arch.columns")
    if a.blocks < 1:
        raise ConfigError("must be positive", "arch.blocks")
    if a.channels is not None:
        if len(a.channels) != a.blocks:
            raise ConfigError(f"{len(a.channels)} entries for {a.blocks} blocks", "arch.channels")
        if any(c < 1 for c in a.channels):
            raise ConfigError("channel counts must be positive", "arch.channels")
    if t.dropout is not None:
        if len(t.dropout) != a.blocks:
            raise ConfigError(f"{len(t.dropout)} rates for {a.blocks} blocks", "train.dropout")
        if any(not 0.0 <= r < 1.0 for r in t.dropout):
            raise ConfigError("rates must lie in [0, 1)", "train.dropout")
    if t.epochs < 1:
        raise ConfigError("must be positive", "train.epochs")
    if t.batch_size < 1:
        raise ConfigError("must be positive", "train.batch_size")
    if t.base_lr < 0:
        raise ConfigError("must be non-negative", "train.lr")
    if not 0.0 <= t.momentum < 1.0:
        raise ConfigError("must lie in [0, 1)", "train.momentum")
    if not 0.0 <= t.local_drop_rate < 1.0:
        raise ConfigError("must lie in [0, 1)", "train.local_drop_rate")
    if not 0.0 <= t.local_fraction <= 1.0:
        raise ConfigError("must lie in [0, 1]", "train.local_fraction")
    if t.precision not in ("f32", "f64"):
        raise ConfigError("must be f32 or f64", "train.precision")
    if t.augment not in TIERS:
        raise ConfigError(f"must be one of {', '.join(TIERS)}", "data.augment")
    if cfg.out.checkpoint_every < 0:
        raise ConfigError("must be non-negative", "out.checkpoint_every")
    for key, source in (("data.source", cfg.data.source), ("data.test", cfg.data.test)):
        if source is None:
            continue
        kind, _, rest = source.partition(":")
        try:
            if kind == "synth":
                _, _, classes, size = parse_synth(rest)
                if size % (1 << a.blocks):
                    raise ConfigError(f"spatial size {size} not divisible by 2^{a.blocks}", key)
                if a.classes is not None and a.classes != classes:
                    raise ConfigError(f"arch.classes={a.classes} but data has {classes} classes", key)
            elif kind == "idx":
                parse_idx(rest)
            else:
                raise ConfigError(f"unknown data source kind {kind!r}", key)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), key) from None


def plan_for(cfg: RunConfig) -> TrainPlan:
    """The training plan with per-block dropout filled in."""
    plan = TrainPlan(**{f.name: getattr(cfg.train, f.name) for f in fields(TrainPlan)})
    if plan.dropout is None:
        plan.dropout = default_dropout(cfg.arch.blocks)
    return plan
