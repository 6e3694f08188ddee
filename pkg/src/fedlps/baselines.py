"""Comparison points: heuristic patterns, the capability-controlled ratio rule and plain FedAvg.

The heuristic patterns and the ratio rule plug into the normal training loop
through the ``pattern`` and ``ratio_rule`` config keys, so any difference in
results comes from the strategy alone.  :func:`fedavg_reference` is a separate,
dense training loop kept deliberately simple so it can serve as an oracle for
the sparse pipeline run with sparsity switched off.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .localtrain import evaluate, heuristic_pattern, sample_batch
from .netcore import ParamSet, backward, forward, sgd_step
from .orchestrator import (CLIENT, SELECT, Setup, build_setup, params_digest, select_clients,
                           stream)
from .sparsity import DEFAULT_S_MIN, clamp_ratio

__all__ = ["heuristic_pattern", "rcr_ratio", "FedAvgResult", "fedavg_reference"]


def rcr_ratio(z: float, s_min: float = DEFAULT_S_MIN) -> float:
    """Ratio set straight from device capability, constant over all rounds."""
    if not 0 < z <= 1:
        raise ValueError(f"capability must be in (0, 1], got {z}")
    return clamp_ratio(z, s_min)


@dataclass
class FedAvgResult:
    params: ParamSet
    digests: list[str] = field(default_factory=list)
    final_accuracy: list[float] = field(default_factory=list)


def _local_sgd(setup: Setup, k: int, global_params: ParamSet, r: int) -> ParamSet:
    cfg = setup.cfg
    train, _ = setup.client_data(k)
    rng = stream(cfg.seed, CLIENT, k, r)
    w = global_params.copy()
    for _ in range(cfg.local_iters):
        batch = sample_batch(train, cfg.batch_size, rng, w.dtype)
        _, cache = forward(w, None, batch, setup.arch)
        grads, _, _ = backward(w, None, batch, cache, setup.arch)
        w = sgd_step(w, grads, cfg.lr, cfg.grad_clip or None)
    return w


def fedavg_reference(cfg: RunConfig, setup: Setup | None = None) -> FedAvgResult:
    """Dense FedAvg with plain cross-entropy, using the same data, init and random streams.

    Clients upload ``global - local`` and the server takes the sample-weighted
    mean of ``global - upload``, summed in client-id order.
    """
    setup = setup or build_setup(cfg)
    omega = setup.params.copy()
    result = FedAvgResult(omega)
    for r in range(cfg.rounds):
        selected = select_clients(cfg.clients, cfg.fraction, stream(cfg.seed, SELECT, r))
        total = 0.0
        acc = [np.zeros_like(a) for a in omega.arrays()]
        for k in selected:
            local = _local_sgd(setup, k, omega, r)
            n = float(len(setup.plan.train[k]))
            total += n
            for a, g, p in zip(acc, omega.arrays(), local.arrays()):
                a += n * (g - (g - p))
        omega = ParamSet.from_arrays([a / total for a in acc])
        result.digests.append(params_digest(omega))
    result.params = omega
    result.final_accuracy = [evaluate(omega, setup.client_data(k)[1], setup.arch)
                             for k in range(cfg.clients)]
    return result
