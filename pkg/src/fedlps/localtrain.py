"""Client-side personalized sparse training.

Each local iteration rebuilds the unit mask from the current importance scores,
evaluates ``task + mu * ||w - w_global||^2 + lam * ||q - sigmoid(|w|_J)||^2`` and
takes one SGD step on both the parameters and the scores.

The task loss depends on ``q`` only through a step function, so its gradient
w.r.t. ``q`` is taken with a straight-through estimator: the mask is treated
as the identity on the backward pass, giving
``dL/dq_j = sum over parameters p incident to unit j of dL/dp * p`` with unit
j's own gate held open, so pruned units still receive a signal.
Set ``q_grad="ir_only"`` to route only the regularizer gradient to ``q``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import costmodel
from .data import DataConfigError, Dataset
from .netcore import (Batch, LayerSpec, NonFiniteLossError, ParamSet, backward, forward,
                      sgd_step)
from .sparsity import (ImportanceIndicator, UnitMask, build_mask, derive_pattern, layer_slices,
                       magnitude_summary, magnitude_summary_grad, top_k_bits, keep_count)

PATTERNS = ("learnable", "random", "ordered", "magnitude")


@dataclass(frozen=True)
class LossConfig:
    mu: float = 1.0
    lam: float = 1.0
    lr: float = 0.1
    local_iters: int = 10
    batch_size: int = 20
    grad_clip: float | None = None
    q_grad: str = "ste"
    accuracy_source: str = "batches"

    def __post_init__(self):
        if self.mu < 0 or self.lam < 0:
            raise ValueError("mu and lam must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.local_iters < 1 or self.batch_size < 1:
            raise ValueError("local_iters and batch_size must be >= 1")
        if self.q_grad not in ("ste", "ir_only"):
            raise ValueError(f"q_grad must be 'ste' or 'ir_only', got {self.q_grad!r}")
        if self.accuracy_source not in ("batches", "train_probe"):
            raise ValueError(f"unknown accuracy_source {self.accuracy_source!r}")


@dataclass
class ClientState:
    client_id: int
    q: ImportanceIndicator
    capability: float
    train: Dataset
    test: Dataset
    last_accuracy: float = 0.0
    personal: ParamSet | None = None
    personal_pattern: np.ndarray | None = None


@dataclass
class ClientReport:
    client_id: int
    residual: ParamSet
    pattern: np.ndarray
    sample_count: int
    local_cost: float
    train_accuracy: float
    ratio_effective: float
    flops: float
    upload: int
    loss_terms: dict = field(default_factory=dict)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def ste_importance_grad(params: ParamSet, cache: dict, arch: Sequence[LayerSpec]) -> np.ndarray:
    """Straight-through gradient of the task loss w.r.t. each hidden unit's gate.

    Each unit's gate is passed through as 1 on the backward pass, so the score
    gradient is the sum over the unit's incident parameters of ``grad * param``
    evaluated as if the unit were active.  For an active unit this is exactly
    the incident sum on the masked network; a pruned unit gets the first-order
    change in loss from switching it back on.
    """
    parts = []
    for i, grad_out in enumerate(cache["out_grads"]):
        pre = cache["acts"][i] @ params.weights[i].T + params.biases[i]
        if arch[i].activation == "relu":
            # incoming part grad_out * relu'(pre) * pre plus outgoing part grad_out * relu(pre)
            out = 2.0 * np.maximum(pre, 0.0)
        else:
            out = 2.0 * pre
        parts.append((grad_out * out).sum(axis=0))
    return np.concatenate(parts)


def loss_terms(params: ParamSet, q: ImportanceIndicator, global_params: ParamSet, batch: Batch,
               mask: UnitMask, arch: Sequence[LayerSpec], cfg: LossConfig) -> dict:
    """Loss values only; the reference the finite-difference tests differentiate."""
    logits, _ = forward(params, mask, batch, arch)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    l_tr = float(-log_probs[np.arange(len(batch.labels)), batch.labels].mean())
    l_pr = float(sum(np.sum((p - g) ** 2) for p, g in zip(params.arrays(), global_params.arrays())))
    l_ir = float(np.sum((q.scores - sigmoid(magnitude_summary(params))) ** 2))
    return {"l_tr": l_tr, "l_pr": l_pr, "l_ir": l_ir,
            "total": l_tr + cfg.mu * l_pr + cfg.lam * l_ir}


def loss_and_grads(params: ParamSet, q: ImportanceIndicator, global_params: ParamSet,
                   batch: Batch, cfg: LossConfig, s: float, arch: Sequence[LayerSpec],
                   mask: UnitMask | None = None):
    """Composite loss gradients.

    Returns ``(grads_w, grads_q, terms, batch_accuracy)``.  When ``mask`` is not
    given it is derived from ``q`` at ratio ``s``.
    """
    if mask is None:
        mask = build_mask(derive_pattern(q, s), arch)
    logits, cache = forward(params, mask, batch, arch)
    task, l_tr, acc = backward(params, mask, batch, cache, arch)

    diff = params.map(lambda p, g: p - g, global_params)
    l_pr = float(sum(np.sum(d * d) for d in diff.arrays()))
    mag = magnitude_summary(params)
    sig = sigmoid(mag)
    q_res = q.scores - sig
    l_ir = float(np.sum(q_res * q_res))
    if not np.isfinite(l_tr + l_pr + l_ir):
        raise NonFiniteLossError("non-finite composite loss")

    ir_w = magnitude_summary_grad(params, -2.0 * q_res * sig * (1.0 - sig))
    grads_w = task.map(lambda t, d, r: t + cfg.mu * 2.0 * d + cfg.lam * r, diff, ir_w)
    grads_q = cfg.lam * 2.0 * q_res
    if cfg.q_grad == "ste":
        grads_q = ste_importance_grad(params, cache, arch) + grads_q
    terms = {"l_tr": l_tr, "l_pr": l_pr, "l_ir": l_ir}
    return grads_w, grads_q, terms, acc


def initial_importance(params: ParamSet, widths: Sequence[int]) -> ImportanceIndicator:
    """Scores that make the importance regularizer zero at the start."""
    return ImportanceIndicator(sigmoid(magnitude_summary(params)), tuple(widths))


def heuristic_pattern(kind: str, params: ParamSet, s: float, widths: Sequence[int],
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Pattern without learned scores: random, ordered (prefix) or magnitude top-k."""
    bits = np.zeros(sum(widths), dtype=np.int8)
    if kind == "magnitude":
        mag = magnitude_summary(params)
    for sl, width in zip(layer_slices(widths), widths):
        k = keep_count(s, width)
        if kind == "ordered":
            bits[sl.start:sl.start + k] = 1
        elif kind == "random":
            if rng is None:
                raise ValueError("random pattern needs an rng")
            bits[sl.start + rng.choice(width, size=k, replace=False)] = 1
        elif kind == "magnitude":
            bits[sl] = top_k_bits(mag[sl], k)
        else:
            raise ValueError(f"not a heuristic pattern kind: {kind!r}")
    return bits


def current_pattern(kind: str, params: ParamSet, q: ImportanceIndicator, s: float,
                    fixed: np.ndarray | None) -> np.ndarray:
    if kind == "learnable":
        return derive_pattern(q, s)
    if kind == "magnitude":
        return heuristic_pattern("magnitude", params, s, q.widths)
    return fixed


def sample_batch(ds: Dataset, size: int, rng: np.random.Generator, dtype) -> Batch:
    idx = rng.integers(len(ds), size=size)
    return Batch(ds.features[idx].astype(dtype, copy=False), ds.labels[idx])


def client_update(state: ClientState, global_params: ParamSet, s: float, cfg: LossConfig,
                  arch: Sequence[LayerSpec], profile: costmodel.DeviceProfile,
                  rng: np.random.Generator, *, alpha: float = 1.0, pattern: str = "learnable",
                  round_index: int | None = None) -> tuple[ClientReport, ClientState]:
    """Local training for one round. Pure: ``state`` is not modified."""
    if len(state.train) == 0:
        raise DataConfigError(f"client {state.client_id} has no training data")
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern strategy {pattern!r}")
    s_eff = min(s, state.capability)
    widths = state.q.widths
    w = global_params.copy()
    q = state.q.copy()
    fixed = None
    if pattern in ("random", "ordered"):
        fixed = heuristic_pattern(pattern, w, s_eff, widths, rng)

    accs, flops = [], 0.0
    sums = {"l_tr": 0.0, "l_pr": 0.0, "l_ir": 0.0}
    for it in range(cfg.local_iters):
        mask = build_mask(current_pattern(pattern, w, q, s_eff, fixed), arch)
        batch = sample_batch(state.train, cfg.batch_size, rng, w.dtype)
        try:
            gw, gq, terms, acc = loss_and_grads(w, q, global_params, batch, cfg, s_eff, arch, mask)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(str(exc), client=state.client_id, round=round_index, iter=it) from exc
        for key in sums:
            sums[key] += terms[key]
        accs.append(acc)
        flops += costmodel.flops_of_round(arch, mask, cfg.batch_size, 1)
        if cfg.lr > 0:
            pm = mask.param_mask(arch, w.dtype)
            try:
                w = sgd_step(w, gw.map(lambda g, m: g * m, pm), cfg.lr, cfg.grad_clip)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(str(exc), client=state.client_id, round=round_index, iter=it) from exc
            q = ImportanceIndicator(q.scores - cfg.lr * gq, widths)

    final_pattern = current_pattern(pattern, w, q, s_eff, fixed)
    final_mask = build_mask(final_pattern, arch)
    pm = final_mask.param_mask(arch, w.dtype)
    residual = global_params.map(lambda g, p, m: (g - p) * m, w, pm)
    personal = w.map(lambda p, m: p * m, pm)

    if cfg.accuracy_source == "train_probe":
        accuracy = evaluate(personal, state.train, arch)
    else:
        accuracy = float(np.mean(accs)) * 100.0
    upload = costmodel.upload_size(final_mask, arch)
    t = costmodel.local_cost(flops, upload, profile, alpha)
    report = ClientReport(
        client_id=state.client_id, residual=residual, pattern=final_pattern,
        sample_count=len(state.train), local_cost=t, train_accuracy=accuracy,
        ratio_effective=s_eff, flops=flops, upload=upload,
        loss_terms={k: v / cfg.local_iters for k, v in sums.items()},
    )
    new_state = replace(state, q=q, last_accuracy=accuracy, personal=personal,
                        personal_pattern=final_pattern)
    return report, new_state


def evaluate(params: ParamSet, ds: Dataset, arch: Sequence[LayerSpec], mask: UnitMask | None = None) -> float:
    """Argmax accuracy in percent."""
    if len(ds) == 0:
        raise DataConfigError("cannot evaluate on an empty split")
    logits, _ = forward(params, mask, Batch(ds.features.astype(params.dtype, copy=False),
                                            ds.labels), arch)
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels)) * 100.0
