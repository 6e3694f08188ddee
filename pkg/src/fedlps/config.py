"""Run configuration: one flat TOML table, every key documented, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .costmodel import DEFAULT_LEVELS, REFERENCE_BANDWIDTH, REFERENCE_FLOPS

HETEROGENEITY_LEVELS = {
    "none": (1.0,),
    "low": (1.0, 1 / 2),
    "median": (1.0, 1 / 2, 1 / 4),
    "high": DEFAULT_LEVELS,
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


@dataclass
class RunConfig:
    name: str = "fedlps"
    seed: int = 0
    threads: int = 1
    precision: str = "float32"  # float64 for bit-exact checks
    # federation
    clients: int = 20
    rounds: int = 100
    fraction: float = 0.1
    # local training
    local_iters: int = 10
    batch_size: int = 20
    lr: float = 0.1
    mu: float = 1.0
    lam: float = 1.0
    grad_clip: float = 0.0  # 0 disables clipping
    q_grad: str = "ste"
    accuracy_source: str = "batches"
    # sparsity and ratio decisions
    pattern: str = "learnable"
    ratio_rule: str = "pucbv"
    fixed_ratio: float = 0.5
    s_min: float = 0.05
    i0: int = 4
    rho: float = 0.5
    delta: float = 0.0
    eliminate: str = "lower"
    split_stats: str = "inherit"
    # devices and cost
    capability_levels: list = field(default_factory=lambda: list(DEFAULT_LEVELS))
    dynamic_capability: bool = False
    alpha: float = 1.0
    flops_ref: float = REFERENCE_FLOPS
    bandwidth_ref: float = REFERENCE_BANDWIDTH
    # data
    dataset: str = "synthetic"
    classes: int = 10
    dim: int = 32
    per_class: int = 200
    sep: float = 3.0
    idx_images: str = ""
    idx_labels: str = ""
    csv_path: str = ""
    classes_per_client: int = 2
    test_fraction: float = 0.2
    # model
    hidden: list = field(default_factory=lambda: [64, 64])
    # output
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def dtype(self):
        import numpy as np
        return np.float64 if self.precision == "float64" else np.float32

    @property
    def selected_per_round(self) -> int:
        return max(math.floor(self.fraction * self.clients + 1e-9), 1)

    def validate(self) -> None:
        choices = {
            "precision": ("float32", "float64"),
            "q_grad": ("ste", "ir_only"),
            "accuracy_source": ("batches", "train_probe"),
            "pattern": ("learnable", "random", "ordered", "magnitude"),
            "ratio_rule": ("pucbv", "rcr", "fixed"),
            "eliminate": ("lower", "upper"),
            "split_stats": ("inherit", "fresh"),
            "dataset": ("synthetic", "idx", "csv"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(key, f"must be one of {allowed}, got {getattr(self, key)!r}")
        positive_ints = ("clients", "local_iters", "batch_size", "i0", "classes", "dim",
                         "per_class", "classes_per_client", "threads")
        for key in positive_ints:
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        if self.rounds < 0:
            raise ConfigError("rounds", "must be >= 0")
        if not 0 < self.fraction <= 1:
            raise ConfigError("fraction", "must be in (0, 1]")
        if not 0 < self.s_min <= 1:
            raise ConfigError("s_min", "must be in (0, 1]")
        if not self.s_min <= self.fixed_ratio <= 1:
            raise ConfigError("fixed_ratio", f"must be in [s_min, 1]")
        for key in ("lr", "sep", "flops_ref", "bandwidth_ref"):
            if getattr(self, key) <= 0:
                raise ConfigError(key, "must be > 0")
        for key in ("mu", "lam", "alpha", "grad_clip", "rho", "checkpoint_every"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be >= 0")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("test_fraction", "must be in [0, 1)")
        if not self.capability_levels or any(not 0 < z <= 1 for z in self.capability_levels):
            raise ConfigError("capability_levels", "must be a non-empty list of values in (0, 1]")
        if not self.hidden or any(int(h) < 1 for h in self.hidden):
            raise ConfigError("hidden", "must be a non-empty list of positive widths")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigError("idx_images", "idx dataset needs idx_images and idx_labels")
        if self.dataset == "csv" and not self.csv_path:
            raise ConfigError("csv_path", "csv dataset needs csv_path")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return from_dict({**self.to_dict(), **changes})


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, value):
    default = _FIELDS[key].default
    if default is dataclasses.MISSING:
        default = _FIELDS[key].default_factory()
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return list(value)
    return value


def from_dict(raw: dict) -> RunConfig:
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    return RunConfig(**{k: _coerce(k, v) for k, v in raw.items()})


def load(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"{path}: {exc}") from exc
    return from_dict(raw)


def dumps(cfg: RunConfig) -> str:
    """Flat TOML text for ``cfg``, readable back by :func:`load`."""
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, str):
            text = '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
        elif isinstance(value, list):
            text = "[" + ", ".join(repr(v) for v in value) + "]"
        else:
            text = repr(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def desk_config(**overrides) -> RunConfig:
    """Small configuration that runs in seconds; the acceptance suite builds on it.

    Ten of twenty clients train each round.  The regularizer weights are smaller
    than the library defaults because at MLP scale weights of 1 swamp the task loss.
    """
    base = RunConfig(name="desk", rounds=60, clients=20, fraction=0.5, classes=10, dim=32,
                     per_class=200, sep=5.0, classes_per_client=2, local_iters=20, mu=0.1,
                     lam=0.1)
    return base.replace(**overrides)
