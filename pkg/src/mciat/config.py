"""Experiment configuration: strict JSON loading, dotted overrides and seed streams."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig
from .mats import FinetuneConfig, MATSConfig
from .pretrain import LossWeights, PretrainConfig
from .synth import PhantomSpec


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


@dataclass(frozen=True)
class DataConfig:
    n_pretrain: int = 128
    n_finetune_train: int = 64
    n_finetune_test: int = 32
    n_association: int = 200

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")


@dataclass(frozen=True)
class ProbeConfig:
    reg: float = 1e-2
    iterations: int = 2000


@dataclass(frozen=True)
class AssociationConfig:
    repetitions: int = 20
    folds: int = 10
    components: int = 5
    alpha: float = 0.05
    q: float = 0.05
    pooled: bool = False

    def __post_init__(self):
        if self.repetitions < 1 or self.folds < 2 or self.components < 1:
            raise ValueError("need repetitions >= 1, folds >= 2 and components >= 1")


@dataclass(frozen=True)
class SeedConfig:
    data: int = 0
    init: int = 1
    mask: int = 2
    folds: int = 3


PURPOSES = {"data": 0x64617461, "init": 0x696E6974, "mask": 0x6D61736B, "folds": 0x666F6C64}


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)

    def __post_init__(self):
        # the pretraining section carries no encoder of its own
        if self.pretrain.encoder != self.encoder:
            object.__setattr__(self, "pretrain", dataclasses.replace(self.pretrain, encoder=self.encoder))
        n = self.phantom.shape
        grid = int(np.prod([s // self.phantom.patch for s in n]))
        if grid != self.encoder.n_tokens or self.phantom.patch**3 != self.encoder.patch_len:
            raise ValueError(
                f"encoder expects {self.encoder.n_tokens} tokens of length {self.encoder.patch_len}, "
                f"phantoms give {grid} tokens of length {self.phantom.patch ** 3}"
            )

    def rng(self, purpose: str, *extra: int) -> np.random.Generator:
        """Independent stream per purpose, so changing one seed leaves the others intact."""
        if purpose not in PURPOSES:
            raise KeyError(f"unknown seed purpose {purpose!r}")
        return np.random.default_rng((getattr(self.seeds, purpose), PURPOSES[purpose], *extra))

    def seed(self, purpose: str, *extra: int) -> int:
        return int(self.rng(purpose, *extra).integers(2**31 - 1))

    def to_dict(self) -> dict:
        d = _to_plain(self)
        del d["pretrain"]["encoder"]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# conversion


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


_SKIP = {("pretrain", "encoder")}


def _convert(hint, value, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {hint}")


def _build(cls, data, path: str = ""):
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if (path, f.name) not in _SKIP}
    for key in sorted(data):
        if key not in names:
            raise ConfigError(f"{_join(path, key)}: unknown key")
    kwargs = {k: _convert(hints[k], v, _join(path, k)) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def apply_override(data: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value`` to a nested dict; the value is parsed as JSON, else kept as a string."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override key {key!r} is malformed")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    for i, part in enumerate(parts[:-1]):
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"{'.'.join(parts[: i + 1])}: cannot set a field inside a non-object")
        node = child
    node[parts[-1]] = value
    return data


def load_config(path=None, overrides=(), seed: int | None = None) -> ExperimentConfig:
    """Defaults, then the JSON file, then ``--set`` overrides, then ``--seed`` (shifts every stream)."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError("<root>: expected an object")
    for item in overrides:
        apply_override(data, item)
    cfg = from_dict(data)
    if seed is not None:
        # seeds named explicitly in the file or overrides win over --seed
        explicit = data.get("seeds", {})
        base = dict(zip(("data", "init", "mask", "folds"), range(seed, seed + 4)))
        cfg = dataclasses.replace(cfg, seeds=SeedConfig(**{k: explicit.get(k, v) for k, v in base.items()}))
    return cfg


def config_schema() -> dict:
    """Nested mapping of every accepted key to its default value."""
    return ExperimentConfig().to_dict()


__all__ = [
    "AssociationConfig",
    "ConfigError",
    "DataConfig",
    "ExperimentConfig",
    "FinetuneConfig",
    "LossWeights",
    "MATSConfig",
    "ProbeConfig",
    "SeedConfig",
    "apply_override",
    "config_schema",
    "from_dict",
    "load_config",
]
