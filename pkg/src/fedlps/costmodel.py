"""FLOP/upload accounting and simulated time costs for heterogeneous devices.

FLOP convention: one multiply-accumulate is 2 FLOPs, and forward + backward
costs 3x the forward pass, so a training iteration costs
``6 * retained_weight_MACs * batch_size``.  Importance-score updates are ignored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .netcore import LayerSpec
from .sparsity import UnitMask

# z = 1 reference device (Adreno 630)
REFERENCE_FLOPS = 727e9
# parameters / second at z = 1; no published value, config-overridable
REFERENCE_BANDWIDTH = 1e6
PATTERN_WORD_BITS = 32
DEFAULT_LEVELS = (1.0, 1 / 2, 1 / 4, 1 / 8, 1 / 16)


class CostConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceProfile:
    flops_capacity: float
    bandwidth_capacity: float
    level: float = 1.0

    def __post_init__(self):
        if self.flops_capacity <= 0 or self.bandwidth_capacity <= 0:
            raise CostConfigError("device capacities must be positive")

    @classmethod
    def for_level(cls, z: float, flops_ref: float = REFERENCE_FLOPS,
                  bandwidth_ref: float = REFERENCE_BANDWIDTH) -> "DeviceProfile":
        return cls(flops_ref * z, bandwidth_ref * z, z)

    def jittered(self, rng: np.random.Generator, low: float = 0.8, high: float = 1.2) -> "DeviceProfile":
        f = rng.uniform(low, high)
        return DeviceProfile(self.flops_capacity * f, self.bandwidth_capacity * f, self.level)


@dataclass(frozen=True)
class CostReport:
    flops: float
    upload_params: int
    local_time: float


def retained_macs(arch: Sequence[LayerSpec], mask: UnitMask | None) -> int:
    """Weight multiply-accumulates per sample on the unmasked sub-network."""
    total = 0
    for i, layer in enumerate(arch):
        rows = layer.out_dim if mask is None or i >= len(mask.units) else int(np.sum(mask.units[i]))
        cols = layer.in_dim if mask is None or i == 0 else int(np.sum(mask.units[i - 1]))
        total += rows * cols
    return total


def flops_of_round(arch: Sequence[LayerSpec], mask: UnitMask | None, samples: int, iters: int) -> float:
    """Training FLOPs for ``iters`` iterations of ``samples``-sized batches."""
    return float(6 * retained_macs(arch, mask) * samples * iters)


def forward_flops(arch: Sequence[LayerSpec], mask: UnitMask | None = None) -> float:
    return float(2 * retained_macs(arch, mask))


def pattern_words(j: int) -> int:
    return math.ceil(j / PATTERN_WORD_BITS)


def upload_size(mask: UnitMask | None, arch: Sequence[LayerSpec]) -> int:
    """Nonzero-mask parameter slots (weights and biases) plus the packed pattern words."""
    total = 0
    for i, layer in enumerate(arch):
        rows = layer.out_dim if mask is None or i >= len(mask.units) else int(np.sum(mask.units[i]))
        cols = layer.in_dim if mask is None or i == 0 else int(np.sum(mask.units[i - 1]))
        total += rows * cols + rows
    j = sum(layer.out_dim for layer in arch[:-1])
    return total + pattern_words(j)


def local_cost(flops: float, upload: float, profile: DeviceProfile, alpha: float = 1.0) -> float:
    if alpha < 0:
        raise CostConfigError(f"alpha must be >= 0, got {alpha}")
    return flops / profile.flops_capacity + alpha * upload / profile.bandwidth_capacity


def global_cost(local_times: Iterable[float]) -> float:
    """Synchronous round time: the slowest selected client."""
    times = list(local_times)
    if not times:
        raise CostConfigError("global cost of an empty round")
    return max(times)
