"""Run configuration as flat ``section.key = value`` text.

Every field has a default, so an empty file is a valid config.  The resolved
config is echoed with :func:`format_config`, which :func:`parse_config` reads
back to an equal object.
"""
from __future__ import annotations

import hashlib
import re
import typing
from dataclasses import dataclass, field, fields, is_dataclass

from .curriculum import ShuffleSchedule, VARIANTS
from .data import SynthConfig

_INT = re.compile(r"[+-]?\d+$")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSection:
    source: str = "synthetic"        # synthetic | directory
    path: str = ""
    seed: int = 0
    ratios: tuple = (0.7, 0.1, 0.2)
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass(frozen=True)
class ScheduleSection(ShuffleSchedule):
    enabled: bool = True
    variant: str = "independent"     # independent | group
    label_mode: str = "realized"     # realized | nominal

    def __post_init__(self):
        super().__post_init__()
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.label_mode not in ("realized", "nominal"):
            raise ValueError(f"label_mode must be realized or nominal, got {self.label_mode!r}")


@dataclass(frozen=True)
class ModelSection:
    widths: tuple = (16, 32, 64)
    theta_dim: int = 32


@dataclass(frozen=True)
class TrainingSection:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 8
    max_steps: int = 0               # 0 = no step cap
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema: float = 0.9


@dataclass(frozen=True)
class EvalSection:
    threshold: float = 0.4
    averaging: str = "micro"         # micro | macro
    cam: str = "refined"             # refined | raw
    label_gate: str = "label"        # label | predicted | none
    classes: tuple = (1,)            # classes that own segmentation masks
    split: str = "test"


@dataclass(frozen=True)
class AblateSection:
    seeds: tuple = (0, 1, 2, 3, 4)
    variants: tuple = ("baseline_cam", "no_fl", "group", "back", "full")
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    out: str = "runs/default"

    def __post_init__(self):
        _validate(self)


def _validate(cfg: RunConfig):
    size = cfg.dataset.synth.size
    if cfg.dataset.source not in ("synthetic", "directory"):
        raise ConfigError(f"dataset.source: expected synthetic or directory, got {cfg.dataset.source!r}")
    if cfg.dataset.source == "directory" and not cfg.dataset.path:
        raise ConfigError("dataset.path: required when dataset.source = directory")
    if cfg.dataset.source == "synthetic":
        bad = [p for p in cfg.schedule.patch_sizes if size % p]
        if bad:
            raise ConfigError(f"schedule.patch_sizes: {bad} do not divide dataset.synth.size = {size}")
    if cfg.training.batch_size < 2:
        raise ConfigError(f"training.batch_size: must be >= 2, got {cfg.training.batch_size}")
    if cfg.training.lr < 0 or cfg.training.epochs < 0 or cfg.training.max_steps < 0:
        raise ConfigError("training: lr, epochs and max_steps must be non-negative")
    if not 0 <= cfg.training.ema < 1:
        raise ConfigError(f"training.ema: must be in [0, 1), got {cfg.training.ema}")
    if len(cfg.model.widths) != 3:
        raise ConfigError(f"model.widths: expected three block widths, got {cfg.model.widths}")
    e = cfg.eval
    if not 0 < e.threshold < 1:
        raise ConfigError(f"eval.threshold: must be in (0, 1), got {e.threshold}")
    for name, value, allowed in (
        ("averaging", e.averaging, ("micro", "macro")),
        ("cam", e.cam, ("refined", "raw")),
        ("label_gate", e.label_gate, ("label", "predicted", "none")),
        ("split", e.split, ("train", "val", "test")),
    ):
        if value not in allowed:
            raise ConfigError(f"eval.{name}: expected one of {allowed}, got {value!r}")


# ---------------------------------------------------------------------------
# text format

def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _flatten(obj, prefix=""):
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(v):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in _flatten(cfg))


def _scalar(text: str):
    if _INT.match(text):
        return int(text)
    try:
        return float(text)
    except ValueError:
        return text


def _coerce(text: str, hint, key: str):
    try:
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is tuple or typing.get_origin(hint) is tuple:
            return tuple(_scalar(t.strip()) for t in text.split(",") if t.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from exc


def _construct(cls, tree: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for name, value in tree.items():
        key = prefix + name
        if name not in names:
            raise ConfigError(f"{key}: unknown field")
        hint = hints[name]
        if is_dataclass(hint):
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: is a section, not a value")
            kwargs[name] = _construct(hint, value, key + ".")
        else:
            if isinstance(value, dict):
                raise ConfigError(f"{key}: is a value, not a section")
            kwargs[name] = _coerce(value, hint, key)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def _build(pairs) -> RunConfig:
    tree: dict = {}
    for key, value in pairs:
        node = tree
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {part!r} is not a section")
        node[leaf] = value
    return _construct(RunConfig, tree)


def parse_pairs(text: str):
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        pairs.append((k, v))
    return pairs


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    pairs = parse_pairs(text)
    pairs += [(k, _format_value(v)) for k, v in (overrides or {}).items()]
    return _build(pairs)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), overrides)


def with_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    return parse_config(format_config(cfg), overrides)


def config_hash(cfg: RunConfig) -> str:
    """Digest of everything that determines a trained model."""
    text = "".join(
        f"{k} = {_format_value(v)}\n"
        for k, v in _flatten(cfg)
        if k.split(".")[0] in ("dataset", "schedule", "model", "training")
    )
    return hashlib.sha256(text.encode()).hexdigest()[:16]
