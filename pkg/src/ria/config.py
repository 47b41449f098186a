"""Model, training and generator configuration with a ``.cfg`` text-file loader.

Precedence: dataclass defaults < config file < explicit overrides (CLI flags).
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

HISTORY_MODES = ("exposed", "clicked")
L1_SCOPES = ("exposed", "all")


@dataclass
class RiaConfig:
    # widths
    D: int = 16
    P_pos: int = 8
    D_t: int | None = None
    # sequence lengths
    T: int = 8
    n: int = 10
    m: int = 5
    L: int = 3
    I: int = 1
    ucdt_depth: int = 1
    heads: int = 1
    # vocabularies
    n_users: int = 500
    n_items: int = 400
    n_categories: int = 8
    # head widths (hidden layers only; input/output widths are implied)
    pointwise_hidden: tuple[int, ...] | None = None
    listwise_hidden: tuple[int, ...] | None = None
    adaptor_hidden: tuple[int, ...] | None = None
    scorer_hidden: int | None = None
    attention_normalize: bool = True
    query_residual: bool = False
    history_mode: str = "exposed"
    l1_scope: str = "exposed"
    ln_eps: float = 1e-6
    zero_heads: bool = False
    # objective / optimizer
    l1_weight: float = 1.0
    l2_weight: float = 1.0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 256
    epochs: int = 3
    patience: int = 2
    val_fraction: float = 0.1
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        self.validate()

    @property
    def D_prime(self) -> int:
        return self.D + self.P_pos

    @property
    def d_t(self) -> int:
        return self.D_t if self.D_t is not None else self.D

    @property
    def d_list(self) -> int:
        return self.d_t + self.D_prime

    def validate(self) -> None:
        for name in ("D", "P_pos", "T", "n", "m", "I", "ucdt_depth", "heads", "n_users", "n_items",
                     "n_categories", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.L < 0:
            raise ConfigError(f"L must be >= 0, got {self.L}")
        if self.D % 2:
            raise ConfigError(f"D must be even (two D/2-wide fields per entity), got {self.D}")
        if self.D_t is not None and self.D_t < 1:
            raise ConfigError("D_t must be positive")
        if self.m > self.n:
            raise ConfigError(f"m ({self.m}) must not exceed n ({self.n})")
        if self.history_mode not in HISTORY_MODES:
            raise ConfigError(f"history_mode must be one of {HISTORY_MODES}")
        if self.l1_scope not in L1_SCOPES:
            raise ConfigError(f"l1_scope must be one of {L1_SCOPES}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")
        for width in (self.D, self.D_prime, self.d_list):
            if width % self.heads:
                raise ConfigError(f"width {width} not divisible by heads={self.heads}")

    def replace(self, **changes) -> "RiaConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: _jsonable(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RiaConfig":
        return _build(cls, data)

    def digest(self) -> str:
        return config_digest(self.to_dict())


@dataclass
class GeneratorConfig:
    n_users: int = 500
    n_items: int = 400
    n_categories: int = 8
    n_requests: int = 50_000
    m: int = 5
    n: int = 10
    L: int = 3
    T: int = 8
    gamma: float = 0.8
    position_bias: tuple[float, ...] | None = None
    noise_seed: int = 0
    latent_dim: int = 16
    affinity_scale: float = 1.0
    cluster_spread: float = 0.6

    def __post_init__(self):
        if self.position_bias is not None:
            self.position_bias = tuple(float(b) for b in self.position_bias)
        self.validate()

    def validate(self) -> None:
        for name in ("n_users", "n_items", "n_categories", "n_requests", "m", "n", "T", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.L < 0:
            raise ConfigError("L must be >= 0")
        if self.n < self.m:
            raise ConfigError(f"n ({self.n}) must be >= m ({self.m})")
        if self.n > self.n_items:
            raise ConfigError("n must not exceed n_items")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.cluster_spread < 0:
            raise ConfigError("cluster_spread must be >= 0")
        if self.position_bias is not None and len(self.position_bias) != self.m:
            raise ConfigError(f"position_bias needs {self.m} entries, got {len(self.position_bias)}")

    def biases(self) -> tuple[float, ...]:
        if self.position_bias is not None:
            return self.position_bias
        # descending examination-style offsets around a base CTR of roughly 0.2
        return tuple(round(-0.6 - 0.25 * o, 6) for o in range(self.m))

    def to_dict(self) -> dict[str, Any]:
        return {f.name: _jsonable(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GeneratorConfig":
        return _build(cls, data)

    def model_config(self, **overrides) -> RiaConfig:
        """A model config whose vocabularies and lengths match this generator."""
        base = dict(n_users=self.n_users, n_items=self.n_items, n_categories=self.n_categories,
                    m=self.m, n=self.n, L=self.L, T=self.T)
        base.update(overrides)
        return RiaConfig(**base)


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def _build(cls, data: Mapping[str, Any]):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown {cls.__name__} key {key!r}")
        kwargs[key] = _coerce(known[key], value)
    return cls(**kwargs)


def _coerce(f: dataclasses.Field, value):
    if value is None:
        return None
    kind = str(f.type)
    if isinstance(value, str):
        text = value.strip()
        if text.lower() in ("none", ""):
            return None
        if "tuple" in kind:
            return tuple(_num(x) for x in text.replace(",", " ").split())
        if kind.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{f.name}: not a boolean: {value!r}")
        if kind.startswith("int"):
            try:
                return int(text)
            except ValueError:
                raise ConfigError(f"{f.name}: not an integer: {value!r}") from None
        if kind.startswith("float"):
            try:
                return float(text)
            except ValueError:
                raise ConfigError(f"{f.name}: not a number: {value!r}") from None
        return text
    if "tuple" in kind and isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def _num(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def config_digest(data: Mapping[str, Any]) -> str:
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunConfig:
    model: RiaConfig = field(default_factory=RiaConfig)
    data: GeneratorConfig = field(default_factory=GeneratorConfig)


def load_config(path: str | Path | None = None, model_overrides: Mapping[str, Any] | None = None,
                data_overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read ``[model]``/``[train]`` and ``[data]`` sections, then apply overrides.

    ``[train]`` keys land in the model config (one dataclass holds both).
    Vocabulary and length keys given only under ``[data]`` are mirrored into
    the model config so one file describes a consistent run.
    """
    model_vals: dict[str, Any] = {}
    data_vals: dict[str, Any] = {}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.optionxform = str  # keys are case-sensitive (D, L, T, I)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        for section in parser.sections():
            if section in ("model", "train"):
                model_vals.update(parser[section])
            elif section == "data":
                data_vals.update(parser[section])
            else:
                raise ConfigError(f"unknown config section [{section}]")
    data_vals.update({k: v for k, v in (data_overrides or {}).items() if v is not None})
    data_cfg = GeneratorConfig.from_dict(data_vals)
    mirrored = {k: getattr(data_cfg, k) for k in ("n_users", "n_items", "n_categories", "m", "n", "L", "T")
                if k not in model_vals}
    mirrored.update(model_vals)
    mirrored.update({k: v for k, v in (model_overrides or {}).items() if v is not None})
    return RunConfig(model=RiaConfig.from_dict(mirrored), data=data_cfg)


TINY = dict(D=8, P_pos=4, T=6, n=5, m=3, L=2, I=2, n_users=7, n_items=11, n_categories=3, precision="float64")


def tiny_config(**overrides) -> RiaConfig:
    """The gradient-check configuration."""
    return RiaConfig(**{**TINY, **overrides})
