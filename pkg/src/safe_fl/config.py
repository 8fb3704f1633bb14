"""Run configuration: dataclasses plus JSON loading with ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .ace import GumbelConfig
from .cro import CroConfig
from .data import DataConfig
from .model import ModelConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class Toggles:
    cro: bool = True
    fau: bool = True
    dmr: bool = True
    ace: bool = True

    @classmethod
    def off(cls) -> "Toggles":
        return cls(False, False, False, False)


@dataclass(frozen=True)
class CroSection:
    beta: float = 1.0


@dataclass(frozen=True)
class AceSection:
    tau_start: float = 1.0
    tau_end: float = 0.1
    dim: int = 4


@dataclass(frozen=True)
class DataSection:
    classes: int = 8
    samples_per_class: int = 128
    imbalance_ratio: float = 10.0
    dirichlet_alpha: float = 0.5
    ses_per_class: int = 8
    image_size: int = 16


@dataclass(frozen=True)
class ModelSection:
    stage_channels: tuple[int, ...] = (8, 16)


@dataclass(frozen=True)
class RunConfig:
    clients: int = 5
    rounds: int = 40
    local_epochs: int = 2
    clients_per_round: int | None = None  # None means every client
    fau_period: int = 5
    learning_rate: float = 1e-2
    batch_size: int = 32
    seed: int = 0
    workers: int = 1
    toggles: Toggles = field(default_factory=Toggles)
    cro: CroSection = field(default_factory=CroSection)
    ace: AceSection = field(default_factory=AceSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    # every client draws the same shuffling stream (symmetry checks only)
    shared_client_stream: bool = False
    track_trajectory: bool = False

    def __post_init__(self):
        k = self.selected_per_round
        if self.clients < 1:
            raise ConfigError("clients", "must be >= 1")
        if not 1 <= k <= self.clients:
            raise ConfigError("clients_per_round", f"must lie in [1, {self.clients}]")
        if self.fau_period < 1:
            raise ConfigError("fau_period", "must be >= 1")
        if self.rounds < 0:
            raise ConfigError("rounds", "must be >= 0")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")

    @property
    def selected_per_round(self) -> int:
        return self.clients if self.clients_per_round is None else self.clients_per_round

    def data_config(self) -> DataConfig:
        d = self.data
        return DataConfig(num_classes=d.classes, samples_per_class=d.samples_per_class,
                          imbalance_ratio=d.imbalance_ratio, dirichlet_alpha=d.dirichlet_alpha,
                          num_clients=self.clients, ses_per_class=d.ses_per_class,
                          image_size=d.image_size, seed=self.seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(input_channels=1, image_size=self.data.image_size,
                           stage_channels=tuple(self.model.stage_channels), num_classes=self.data.classes,
                           ace_enabled=self.toggles.ace, ace_dim=self.ace.dim, num_clients=self.clients)

    def gumbel_config(self) -> GumbelConfig:
        return GumbelConfig(self.ace.tau_start, self.ace.tau_end)

    def cro_config(self) -> CroConfig:
        return CroConfig(self.cro.beta)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _build(cls, raw, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(prefix or "<root>", "expected an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(path, "unknown key")
        default = known[key].default_factory() if known[key].default_factory is not dataclasses.MISSING \
            else known[key].default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, path)
        else:
            kwargs[key] = _coerce(value, default, path)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(prefix or "<root>", str(e)) from None


def _coerce(value, default, path: str):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(path, f"expected a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(path, f"expected a number, got {value!r}")
    if isinstance(default, tuple):
        if isinstance(value, list) and all(isinstance(v, int) for v in value):
            return tuple(value)
        raise ConfigError(path, f"expected a list of integers, got {value!r}")
    if default is None:  # clients_per_round
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError(path, f"expected an integer or null, got {value!r}")
    return value


def config_from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "")


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``a.b=value`` strings; values parse as JSON, falling back to plain strings."""
    raw = json.loads(json.dumps(raw))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node, parts = raw, key.split(".")
        cls = RunConfig
        for part in parts[:-1]:
            known = {f.name: f for f in fields(cls)}
            if part not in known or known[part].default_factory is dataclasses.MISSING:
                raise ConfigError(key, "unknown key")
            cls = type(known[part].default_factory())
            node = node.setdefault(part, {})
        if parts[-1] not in {f.name for f in fields(cls)}:
            raise ConfigError(key, "unknown key")
        node[parts[-1]] = value
    return raw


def load_config(path, overrides=()) -> RunConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), f"invalid JSON ({e})") from None
    return config_from_dict(apply_overrides(raw, overrides))
