"""Fully-connected network with per-neuron masking and a hand-written backward pass.

Parameters live in a :class:`ParamSet` (one weight matrix and one bias vector per
layer, weights stored ``out_dim x in_dim``).  Hidden neurons can be switched off
through a :class:`~fedlps.sparsity.UnitMask`; the output layer is never masked.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity", "softmax-logits")
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}

CHECKPOINT_MAGIC = b"FLPS"
CHECKPOINT_VERSION = 1


class StructuralError(ValueError):
    """Shape or architecture mismatch. Always a programming bug."""


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, **context):
        self.context = context
        if context:
            message = f"{message} ({', '.join(f'{k}={v}' for k, v in context.items())})"
        super().__init__(message)


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise StructuralError(f"layer dims must be positive, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise StructuralError(f"unknown activation {self.activation!r}")


def mlp(sizes: Sequence[int]) -> list[LayerSpec]:
    """Architecture for ``sizes = [input, hidden..., classes]`` with ReLU hidden layers."""
    if len(sizes) < 2:
        raise StructuralError("need at least an input and an output size")
    layers = [LayerSpec(a, b, "relu") for a, b in zip(sizes[:-2], sizes[1:-1])]
    layers.append(LayerSpec(sizes[-2], sizes[-1], "softmax-logits"))
    return validate_arch(layers)


def validate_arch(arch: Sequence[LayerSpec]) -> list[LayerSpec]:
    arch = list(arch)
    if not arch:
        raise StructuralError("empty architecture")
    for i, (a, b) in enumerate(zip(arch[:-1], arch[1:])):
        if a.out_dim != b.in_dim:
            raise StructuralError(f"layer {i} out_dim {a.out_dim} != layer {i + 1} in_dim {b.in_dim}")
    for i, layer in enumerate(arch[:-1]):
        if layer.activation == "softmax-logits":
            raise StructuralError(f"softmax-logits only allowed on the final layer (layer {i})")
    return arch


def hidden_widths(arch: Sequence[LayerSpec]) -> list[int]:
    return [layer.out_dim for layer in arch[:-1]]


@dataclass
class ParamSet:
    """Per-layer weights (out x in) and biases (out,). Also used for gradients."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def layer_count(self) -> int:
        return len(self.weights)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def copy(self) -> "ParamSet":
        return ParamSet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "ParamSet":
        return ParamSet([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        """Interleaved [W0, b0, W1, b1, ...] views (not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "ParamSet":
        return cls(list(arrays[0::2]), list(arrays[1::2]))

    def map(self, fn, *others: "ParamSet") -> "ParamSet":
        return ParamSet.from_arrays(
            [fn(a, *rest) for a, *rest in zip(self.arrays(), *(o.arrays() for o in others))]
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, flat: np.ndarray) -> "ParamSet":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(flat[pos:pos + a.size], dtype=a.dtype).reshape(a.shape))
            pos += a.size
        return ParamSet.from_arrays(out)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def check_shape(self, arch: Sequence[LayerSpec]) -> None:
        if len(arch) != self.layer_count:
            raise StructuralError(f"{self.layer_count} parameter layers for {len(arch)}-layer architecture")
        for i, (layer, w, b) in enumerate(zip(arch, self.weights, self.biases)):
            if w.shape != (layer.out_dim, layer.in_dim) or b.shape != (layer.out_dim,):
                raise StructuralError(f"layer {i}: params {w.shape}/{b.shape} vs spec {layer}")

    def astype(self, dtype) -> "ParamSet":
        return self.map(lambda a: a.astype(dtype))


GradSet = ParamSet


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or len(self.inputs) < 1:
            raise StructuralError(f"batch inputs must be a non-empty matrix, got {self.inputs.shape}")
        if self.labels.shape != (len(self.inputs),):
            raise StructuralError("labels must be one index per row")


def init_params(arch: Sequence[LayerSpec], rng: np.random.Generator, dtype=np.float64) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for layer in arch:
        limit = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        weights.append(rng.uniform(-limit, limit, size=(layer.out_dim, layer.in_dim)).astype(dtype))
        biases.append(np.zeros(layer.out_dim, dtype=dtype))
    return ParamSet(weights, biases)


def _unit_vectors(mask, arch: Sequence[LayerSpec], dtype) -> list[np.ndarray | None]:
    if mask is None:
        return [None] * (len(arch) - 1)
    units = mask.units
    widths = hidden_widths(arch)
    if len(units) != len(widths) or any(len(u) != w for u, w in zip(units, widths)):
        raise StructuralError(
            f"mask unit counts {[len(u) for u in units]} do not match hidden widths {widths}"
        )
    return [np.asarray(u, dtype=dtype) for u in units]


def forward(params: ParamSet, mask, batch: Batch, arch: Sequence[LayerSpec]):
    """Masked forward pass.

    Returns ``(logits, cache)``. ``mask=None`` means every unit is active.  A masked
    unit has its activation forced to zero, which is the same network as zeroing
    its incoming row and outgoing column.
    """
    params.check_shape(arch)
    if batch.inputs.shape[1] != arch[0].in_dim:
        raise StructuralError(f"input width {batch.inputs.shape[1]} != {arch[0].in_dim}")
    units = _unit_vectors(mask, arch, params.dtype)
    h = np.asarray(batch.inputs, dtype=params.dtype)
    acts = [h]
    pre = []
    for i, layer in enumerate(arch):
        w, b = params.weights[i], params.biases[i]
        if i > 0 and units[i - 1] is not None:
            w = w * units[i - 1]
        if i < len(units) and units[i] is not None:
            w = w * units[i][:, None]
            b = b * units[i]
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        acts.append(h)
    cache = {"acts": acts, "pre": pre, "units": units}
    return h, cache


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. logits."""
    # non-finite logits are reported by the caller's finiteness check, not as warnings
    with np.errstate(invalid="ignore", over="ignore"):
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        total = exp.sum(axis=1, keepdims=True)
        log_probs = shifted - np.log(total)
    n = len(labels)
    loss = -log_probs[np.arange(n), labels].mean()
    dlogits = exp / total
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def backward(params: ParamSet, mask, batch: Batch, cache, arch: Sequence[LayerSpec],
             label_loss: str = "xent"):
    """Gradients of the mean cross-entropy through the masked network.

    Returns ``(grads, task_loss, batch_accuracy)``; accuracy is a fraction in [0, 1].
    Gradient entries at masked positions come out exactly zero.  The gradient
    reaching each hidden layer's output, with that layer's own mask passed
    through, is stored in ``cache["out_grads"]`` for gate estimators.
    """
    if label_loss != "xent":
        raise ValueError(f"unsupported label loss {label_loss!r}")
    acts, units = cache["acts"], cache["units"]
    logits = acts[-1]
    loss, delta = softmax_xent(logits, batch.labels)
    if not np.isfinite(loss):
        raise NonFiniteLossError("non-finite task loss")
    accuracy = float(np.mean(np.argmax(logits, axis=1) == batch.labels))

    weights, biases = [None] * len(arch), [None] * len(arch)
    out_grads = [None] * (len(arch) - 1)
    for i in range(len(arch) - 1, -1, -1):
        w_rows = params.weights[i]
        if i < len(units) and units[i] is not None:
            w_rows = w_rows * units[i][:, None]
        w = w_rows
        if i > 0 and units[i - 1] is not None:
            w = w * units[i - 1]
        gw = delta.T @ acts[i]
        gb = delta.sum(axis=0)
        if i < len(units) and units[i] is not None:
            gw *= units[i][:, None]
            gb *= units[i]
        if i > 0 and units[i - 1] is not None:
            gw *= units[i - 1]
        weights[i], biases[i] = gw, gb
        if i > 0:
            out_grads[i - 1] = delta @ w_rows
            delta = delta @ w
            if arch[i - 1].activation == "relu":
                delta = delta * (cache["pre"][i - 1] > 0)
    cache["out_grads"] = out_grads
    return ParamSet(weights, biases), loss, accuracy


def global_norm(grads: ParamSet) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in grads.arrays())))


def sgd_step(params: ParamSet, grads: ParamSet, lr: float, clip: float | None = None) -> ParamSet:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if clip is not None:
        norm = global_norm(grads)
        if norm > clip:
            grads = grads.map(lambda g: g * (clip / norm))
    out = params.map(lambda p, g: p - lr * g, grads)
    if not out.is_finite():
        raise NonFiniteLossError("parameters became non-finite after SGD step")
    return out


def predict(params: ParamSet, mask, inputs: np.ndarray, arch: Sequence[LayerSpec]) -> np.ndarray:
    logits, _ = forward(params, mask, Batch(inputs, np.zeros(len(inputs), dtype=np.int64)), arch)
    return np.argmax(logits, axis=1)


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(path, params: ParamSet, arch: Sequence[LayerSpec], pattern=None) -> None:
    """Little-endian binary: magic, version, layer headers, float64 weights/biases,
    then a length-prefixed bit-packed pattern (length 0 when absent)."""
    params.check_shape(arch)
    with open(path, "wb") as fh:
        fh.write(to_bytes(params, arch, pattern))


def to_bytes(params: ParamSet, arch: Sequence[LayerSpec], pattern=None) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arch))]
    for layer in arch:
        parts.append(struct.pack("<III", layer.in_dim, layer.out_dim, _ACT_CODE[layer.activation]))
    for w, b in zip(params.weights, params.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    if pattern is None:
        parts.append(struct.pack("<I", 0))
    else:
        bits = np.asarray(pattern, dtype=bool)
        parts.append(struct.pack("<I", len(bits)))
        parts.append(np.packbits(bits, bitorder="little").tobytes())
    return b"".join(parts)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def from_bytes(data: bytes):
    """Inverse of :func:`to_bytes`. Returns ``(params, arch, pattern_or_None)``."""
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {data[:4]!r}")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    arch = []
    for _ in range(n_layers):
        i, o, code = struct.unpack_from("<III", data, pos)
        pos += 12
        arch.append(LayerSpec(i, o, ACTIVATIONS[code]))
    weights, biases = [], []
    for layer in arch:
        n = layer.in_dim * layer.out_dim
        weights.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(layer.out_dim, layer.in_dim).copy())
        pos += 8 * n
        biases.append(np.frombuffer(data, dtype="<f8", count=layer.out_dim, offset=pos).copy())
        pos += 8 * layer.out_dim
    (bits_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    pattern = None
    if bits_len:
        packed = np.frombuffer(data, dtype=np.uint8, count=(bits_len + 7) // 8, offset=pos)
        pattern = np.unpackbits(packed, count=bits_len, bitorder="little").astype(np.int8)
    return ParamSet(weights, biases), validate_arch(arch), pattern
