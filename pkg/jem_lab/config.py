"""
Run configuration loaded from plain-text key = value files.

Keys are namespaced by section (seed, data.*, model.*, train.*, sampler.*,
attack.*). Lines starting with # are comments. Tuples are comma-separated and
"none" stands for an unset optional value.
"""

import logging
import math
import os
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, get_type_hints

from .data import DatasetSpec, validate_spec
from .diffcore import ACTIVATIONS, Network
from .errors import ConfigError
from .robustness import NORMS, AttackConfig
from .rng import Rng
from .sampler import SamplerConfig
from .trainer import TrainConfig

logger = logging.getLogger(__name__)

REQUIRED_KEYS = ("seed", "data.generator", "data.num_classes", "data.num_points")

# fields owned by another key: the run seed and the nested sampler section
_EXCLUDED = {"data": {"seed"}, "train": {"sampler"}}


@dataclass(frozen=True)
class ModelConfig:
    hidden: Tuple[int, ...] = (64, 64)
    activation: str = "softplus"
    init_scale: float = 1.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{self.activation}', expected one of {ACTIVATIONS}")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")

    def build(self, input_dim: int, num_classes: int, rng: Rng) -> Network:
        return Network.mlp(input_dim, self.hidden, num_classes, self.activation, rng, self.init_scale)


@dataclass(frozen=True)
class AttackPlan:
    """Every (norm, refine_steps) pair gets its own robustness curve."""
    norms: Tuple[str, ...] = ("linf", "l2")
    refine_steps: Tuple[int, ...] = (0, 1, 10)
    transfer_steps: Tuple[int, ...] = (1, 10)
    pgd_iters: int = 40
    restarts: int = 20
    eot_samples: int = 5
    search_steps: int = 12
    step_scale: float = 2.5
    eps_max: Optional[float] = None
    num_inputs: int = 300
    votes: int = 5
    pointwise_inputs: int = 100
    # refinement SGLD settings; none keeps the training sampler's
    refine_alpha: Optional[float] = None
    refine_sigma: Optional[float] = None

    def __post_init__(self):
        unknown = [n for n in self.norms if n not in NORMS]
        if unknown:
            raise ConfigError(f"unknown attack norms {unknown}, expected a subset of {NORMS}")
        if self.refine_alpha is not None and self.refine_alpha <= 0:
            raise ConfigError("attack.refine_alpha must be positive")
        if self.refine_sigma is not None and self.refine_sigma < 0:
            raise ConfigError("attack.refine_sigma must be non-negative")

    def refine_sampler(self, sampler: SamplerConfig) -> SamplerConfig:
        """The sampler the defense refines with: the training sampler with this plan's overrides."""
        overrides = {}
        if self.refine_alpha is not None:
            overrides["alpha"] = self.refine_alpha
        if self.refine_sigma is not None:
            overrides["sigma"] = self.refine_sigma
            overrides["proper_mode"] = False
        return replace(sampler, **overrides)

    def attack_config(self, norm: str, refine_steps: int) -> AttackConfig:
        return AttackConfig(norm=norm, pgd_iters=self.pgd_iters, restarts=self.restarts,
                            eot_samples=self.eot_samples, refine_steps=refine_steps,
                            search_steps=self.search_steps, step_scale=self.step_scale,
                            eps_max=self.eps_max, num_inputs=self.num_inputs, votes=self.votes)


_SECTIONS = {
    "data": DatasetSpec,
    "model": ModelConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "attack": AttackPlan,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data: DatasetSpec
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackPlan = field(default_factory=AttackPlan)

    @property
    def sampler(self) -> SamplerConfig:
        return self.train.sampler

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, data=replace(self.data, seed=seed))

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        """Parse key = value text; unknown or missing required keys raise ConfigError."""
        raw = _read_pairs(text, source)
        missing = [key for key in REQUIRED_KEYS if key not in raw]
        if missing:
            raise ConfigError(f"{source}: missing required key '{missing[0]}'")

        values: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTIONS}
        seed = _coerce(raw.pop("seed"), int, "seed")
        for key, value in raw.items():
            section, _, name = key.partition(".")
            allowed = _section_fields(section)
            if name not in allowed:
                raise ConfigError(f"{source}: unknown key '{key}'")
            values[section][name] = _coerce(value, allowed[name], key)

        try:
            sampler = SamplerConfig(**values["sampler"])
            data = DatasetSpec(seed=seed, **values["data"])
            validate_spec(data)
            return cls(seed=seed, data=data, model=ModelConfig(**values["model"]),
                       train=TrainConfig(sampler=sampler, **values["train"]),
                       attack=AttackPlan(**values["attack"]))
        except ConfigError as e:
            raise ConfigError(f"{source}: {e}") from e

    @classmethod
    def load(cls, path, seed: Optional[int] = None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        config = cls.parse(path.read_text(), str(path))
        if seed is not None:
            config = config.with_seed(seed)
        logger.info(f"Loaded configuration from {path} (seed {config.seed})")
        return config

    def to_text(self) -> str:
        """Every key, sorted; parse(to_text()) reproduces the config."""
        lines = [f"seed = {self.seed}"]
        sections = {"data": self.data, "model": self.model, "train": self.train,
                    "sampler": self.train.sampler, "attack": self.attack}
        for section, obj in sections.items():
            for name in sorted(_section_fields(section)):
                lines.append(f"{section}.{name} = {_format(getattr(obj, name))}")
        return "\n".join(sorted(lines)) + "\n"


def _read_pairs(text: str, source: str) -> Dict[str, str]:
    pairs: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got '{line}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{source}:{number}: duplicate key '{key}'")
        pairs[key] = value
    return pairs


def _section_fields(section: str) -> Dict[str, Any]:
    cls = _SECTIONS.get(section)
    if cls is None:
        return {}
    hints = get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls) if f.name not in _EXCLUDED.get(section, set())}


def _coerce(raw: str, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is typing.Union:
            if raw.lower() in ("none", ""):
                return None
            return _coerce(raw, next(a for a in args if a is not type(None)), key)
        if origin is tuple:
            return tuple(_coerce(item.strip(), args[0], key) for item in raw.split(",") if item.strip())
        if hint is bool:
            lowered = raw.lower()
            if lowered in ("true", "yes", "1"):
                return True
            if lowered in ("false", "no", "0"):
                return False
            raise ValueError(f"not a boolean: '{raw}'")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"invalid value for '{key}': {e}") from e


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    return str(value)


def env_threads(default: int = 1) -> int:
    """Thread count from JEM_THREADS when set."""
    value = os.getenv("JEM_THREADS")
    if not value:
        return default
    try:
        return max(1, int(value))
    except ValueError:
        logger.warning(f"Ignoring JEM_THREADS={value!r}: not an integer")
        return default
