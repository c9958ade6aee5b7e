"""Experiment configuration: a flat, section-less TOML file plus overrides."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import tomli

from .aggregation import AggregationSpec
from .dataset import FORMATS
from .evaluation import PROTOCOLS


# "interacted": negatives avoid train and held-out items alike.
# "train": only train items are avoided, so the held-out item is an ordinary unobserved item.
NEGATIVE_EXCLUDES = ("interacted", "train")
# table local training starts from: the rho-mix used for inference, or the raw aggregate
TRAIN_FROM = ("interpolated", "aggregate")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "data/ml-100k/u.data"
    format: str = "tsv4"
    rounds: int = 100
    epochs: int = 2
    eta: float = 0.05
    negatives: int = 4
    dim: int = 16
    batch_size: int = 256
    rho: float = 0.8
    train_ratio: float = 1.0
    cohort_size: Optional[int] = None  # None = every client, every round
    global_seed: int = 0
    mode: str = "composite"
    alpha: float = 0.5
    beta: float = 0.5
    k: int = 4
    proxy: str = "data_size"
    epsilon_floor: Optional[float] = None
    s: Optional[int] = None
    complementarity_sign: str = "default"
    eval_every: int = 10
    eval_protocol: str = "full_rank"
    top_k: int = 10
    negatives_exclude: str = "train"
    train_from: str = "interpolated"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("rounds", "epochs", "batch_size", "dim", "eval_every", "top_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.cohort_size is not None and self.cohort_size < 1:
            raise ConfigError("cohort_size must be >= 1")
        if self.negatives < 0:
            raise ConfigError("negatives must be >= 0")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must be in [0, 1]")
        if not 0.0 < self.train_ratio <= 1.0:
            raise ConfigError("train_ratio must be in (0, 1]")
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}")
        if self.negatives_exclude not in NEGATIVE_EXCLUDES:
            raise ConfigError(f"negatives_exclude must be one of {NEGATIVE_EXCLUDES}")
        if self.train_from not in TRAIN_FROM:
            raise ConfigError(f"train_from must be one of {TRAIN_FROM}")
        if self.eval_protocol not in PROTOCOLS:
            raise ConfigError(f"eval_protocol must be one of {PROTOCOLS}")
        try:
            self.aggregation_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def aggregation_spec(self) -> AggregationSpec:
        return AggregationSpec(
            mode=self.mode,
            alpha=self.alpha,
            beta=self.beta,
            k=self.k,
            proxy=self.proxy,
            epsilon_floor=self.epsilon_floor,
            s=self.s,
            complementarity_sign=self.complementarity_sign,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if value is None:
                continue
            if isinstance(value, str):
                lines.append(f'{key} = "{value}"')
            elif isinstance(value, bool):
                lines.append(f"{key} = {str(value).lower()}")
            else:
                lines.append(f"{key} = {value!r}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, value):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    if key == "cohort_size" and value in ("all", "none", "None"):
        return None
    if value is None or (isinstance(value, str) and value.lower() == "none" and "Optional" in kind):
        return None
    try:
        if "int" in kind:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if "float" in kind:
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return str(value)


def parse_config_text(text: str) -> dict:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; found sections {nested}")
    return {k: _coerce(k, v) for k, v in raw.items()}


def parse_override(item: str) -> tuple[str, object]:
    """Parse ``KEY=VALUE``; the value is read as a TOML scalar, else a bare string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    key, _, value = item.partition("=")
    key, value = key.strip(), value.strip()
    try:
        parsed = tomli.loads(f"v = {value}")["v"]
    except tomli.TOMLDecodeError:
        parsed = value
    return key, _coerce(key, parsed)


def load_config(path=None, overrides=(), env_seed: Optional[str] = None):
    """Resolve a config file and ``--set`` overrides into an ExperimentConfig.

    Returns ``(config, sha256 of the file text)``. ``env_seed`` (the value of
    FEDCA_SEED) wins over both when given.
    """
    values: dict = {}
    digest = hashlib.sha256(b"").hexdigest()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        digest = hashlib.sha256(text.encode()).hexdigest()
        values.update(parse_config_text(text))
    for item in overrides:
        key, value = parse_override(item)
        values[key] = value
    if env_seed is not None and env_seed != "":
        try:
            values["global_seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"FEDCA_SEED must be an integer, got {env_seed!r}") from None
    try:
        return ExperimentConfig(**values), digest
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
