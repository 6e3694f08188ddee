"""Unit-wise importance scores, top-k sparse patterns and the masks they induce.

A pattern is a flat 0/1 vector over every hidden neuron (``J`` entries, layer
after layer).  The same ratio is applied to each hidden layer independently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .netcore import LayerSpec, ParamSet, StructuralError, hidden_widths

DEFAULT_S_MIN = 0.05


def layer_slices(widths: Sequence[int]) -> list[slice]:
    offsets = np.concatenate([[0], np.cumsum(widths)]).astype(int)
    return [slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:])]


@dataclass
class ImportanceIndicator:
    scores: np.ndarray
    widths: tuple[int, ...]

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.scores) != sum(self.widths):
            raise StructuralError(f"{len(self.scores)} scores for {sum(self.widths)} units")
        if not np.isfinite(self.scores).all():
            raise ValueError("importance scores must be finite")

    @property
    def layer_offsets(self) -> list[int]:
        return [s.start for s in layer_slices(self.widths)]

    def locate(self, index: int) -> tuple[int, int]:
        """Map a flat score index to ``(hidden layer, unit)``."""
        for layer, sl in enumerate(layer_slices(self.widths)):
            if sl.start <= index < sl.stop:
                return layer, index - sl.start
        raise IndexError(index)

    def copy(self) -> "ImportanceIndicator":
        return ImportanceIndicator(self.scores.copy(), self.widths)


def clamp_ratio(s: float, s_min: float = DEFAULT_S_MIN) -> float:
    return float(min(1.0, max(s_min, s)))


def keep_count(s: float, width: int) -> int:
    """Units retained in a layer of ``width`` at ratio ``s`` (half-up rounding, floor of one)."""
    return max(1, min(width, math.floor(s * width + 0.5)))


def top_k_bits(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated scores: ties keep the lower index
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    bits = np.zeros(len(scores), dtype=np.int8)
    bits[order[:k]] = 1
    return bits


def derive_pattern(q: ImportanceIndicator, s: float) -> np.ndarray:
    """Keep the top ``keep_count(s, width)`` scoring units of every hidden layer.

    This is the step function applied at the (1 - s)-quantile of the scores,
    realised as an exact per-layer top-k.
    """
    if not np.isfinite(q.scores).all():
        raise ValueError("importance scores must be finite")
    bits = np.zeros(len(q.scores), dtype=np.int8)
    for sl, width in zip(layer_slices(q.widths), q.widths):
        bits[sl] = top_k_bits(q.scores[sl], keep_count(s, width))
    return bits


@dataclass
class UnitMask:
    """Per-hidden-layer 0/1 unit vectors; inputs and output classes are implicit ones."""

    units: list[np.ndarray]

    @property
    def pattern(self) -> np.ndarray:
        return np.concatenate(self.units).astype(np.int8)

    def param_mask(self, arch: Sequence[LayerSpec], dtype=np.float64) -> ParamSet:
        """Parameter-level mask: 1 where both the producing and consuming unit are kept."""
        weights, biases = [], []
        for i, layer in enumerate(arch):
            rows = self.units[i] if i < len(self.units) else np.ones(layer.out_dim)
            cols = self.units[i - 1] if i > 0 else np.ones(layer.in_dim)
            weights.append(np.outer(rows, cols).astype(dtype))
            biases.append(np.asarray(rows, dtype=dtype).copy())
        return ParamSet(weights, biases)

    @classmethod
    def full(cls, arch: Sequence[LayerSpec]) -> "UnitMask":
        return cls([np.ones(w, dtype=np.int8) for w in hidden_widths(arch)])


def build_mask(pattern: np.ndarray, arch: Sequence[LayerSpec]) -> UnitMask:
    widths = hidden_widths(arch)
    pattern = np.asarray(pattern)
    if pattern.ndim != 1 or len(pattern) != sum(widths):
        raise StructuralError(f"pattern length {pattern.shape} does not match {sum(widths)} hidden units")
    return UnitMask([pattern[sl].astype(np.int8) for sl in layer_slices(widths)])


def magnitude_summary(params: ParamSet) -> np.ndarray:
    """Per hidden unit: sum of |incoming weights| + |bias| + |outgoing weights|."""
    parts = []
    for i in range(params.layer_count - 1):
        incoming = np.abs(params.weights[i]).sum(axis=1)
        outgoing = np.abs(params.weights[i + 1]).sum(axis=0)
        parts.append(incoming + np.abs(params.biases[i]) + outgoing)
    if not parts:
        return np.zeros(0, dtype=params.dtype)
    return np.concatenate(parts)


def magnitude_summary_grad(params: ParamSet, coeff: np.ndarray) -> ParamSet:
    """Gradient of ``sum_j coeff_j * magnitude_summary(params)_j`` w.r.t. every parameter.

    Uses sign(0) = 0 as the subgradient at the kink.
    """
    widths = [len(b) for b in params.biases[:-1]]
    slices = layer_slices(widths)
    weights = [np.zeros_like(w) for w in params.weights]
    biases = [np.zeros_like(b) for b in params.biases]
    for i, sl in enumerate(slices):
        c = coeff[sl]
        weights[i] += c[:, None] * np.sign(params.weights[i])
        biases[i] += c * np.sign(params.biases[i])
        weights[i + 1] += c[None, :] * np.sign(params.weights[i + 1])
    return ParamSet(weights, biases)


def apply_mask(params: ParamSet, mask: UnitMask, arch: Sequence[LayerSpec]) -> ParamSet:
    return params.map(lambda p, m: p * m, mask.param_mask(arch, params.dtype))


def retained_params(mask: UnitMask, arch: Sequence[LayerSpec]) -> int:
    return int(sum(int(a.sum()) for a in mask.param_mask(arch).arrays()))


def total_params(arch: Sequence[LayerSpec]) -> int:
    return sum(layer.out_dim * (layer.in_dim + 1) for layer in arch)


def sparsity_of(mask: UnitMask, arch: Sequence[LayerSpec]) -> float:
    """Fraction of all parameters (weights and biases) left unmasked."""
    return retained_params(mask, arch) / total_params(arch)


def pack_pattern(pattern: np.ndarray) -> bytes:
    bits = np.asarray(pattern, dtype=bool)
    return len(bits).to_bytes(4, "little") + np.packbits(bits, bitorder="little").tobytes()


def unpack_pattern(data: bytes) -> np.ndarray:
    n = int.from_bytes(data[:4], "little")
    packed = np.frombuffer(data[4:4 + (n + 7) // 8], dtype=np.uint8)
    return np.unpackbits(packed, count=n, bitorder="little").astype(np.int8)
