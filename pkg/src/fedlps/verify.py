"""Self-checks behind ``fedlps verify``.

Each check recomputes something the library produces by an independent route
(finite differences, an elementwise loop, a dense FedAvg run, plain-Python
bandit arithmetic) and returns ``(passed, detail)``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import bandit, costmodel
from .baselines import fedavg_reference
from .config import desk_config
from .localtrain import ClientReport, LossConfig, loss_and_grads, loss_terms, sigmoid
from .netcore import Batch, init_params, mlp
from .orchestrator import aggregate as default_aggregate
from .orchestrator import run
from .sparsity import (ImportanceIndicator, UnitMask, build_mask, derive_pattern,
                       layer_slices, magnitude_summary)

RATIO_GRID = tuple(round(0.05 * i, 2) for i in range(1, 21))


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def check_gradients(nets: int = 20, seed: int = 0) -> tuple[bool, str]:
    """Composite-loss gradients w.r.t. weights, and the regularizer part w.r.t. scores."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    h = 1e-6
    for _ in range(nets):
        sizes = [int(rng.integers(2, 6)) for _ in range(4)]
        arch = mlp(sizes)
        params = init_params(arch, rng, dtype=np.float64)
        params = params.map(lambda a: a + 0.3 * rng.standard_normal(a.shape))
        anchor = params.map(lambda a: a + 0.1 * rng.standard_normal(a.shape))
        widths = sizes[1:-1]
        q = ImportanceIndicator(rng.random(sum(widths)), tuple(widths))
        s = float(rng.uniform(0.3, 1.0))
        mask = build_mask(derive_pattern(q, s), arch)
        batch = Batch(rng.random((6, sizes[0])), rng.integers(sizes[-1], size=6))
        cfg = LossConfig(mu=float(rng.uniform(0, 1)), lam=float(rng.uniform(0, 1)), q_grad="ir_only")
        gw, gq, _, _ = loss_and_grads(params, q, anchor, batch, cfg, s, arch, mask)

        flat = params.flatten()
        pm = mask.param_mask(arch, np.float64).flatten()
        analytic = gw.flatten()
        for i in range(flat.size):
            if pm[i] == 0:
                continue
            up, dn = flat.copy(), flat.copy()
            up[i] += h
            dn[i] -= h
            fu = loss_terms(params.unflatten(up), q, anchor, batch, mask, arch, cfg)["total"]
            fd = loss_terms(params.unflatten(dn), q, anchor, batch, mask, arch, cfg)["total"]
            worst = max(worst, float(_rel_err(analytic[i], (fu - fd) / (2 * h))))
        for j in range(q.scores.size):
            up, dn = q.scores.copy(), q.scores.copy()
            up[j] += h
            dn[j] -= h
            fu = cfg.lam * float(np.sum((up - sigmoid(magnitude_summary(params))) ** 2))
            fd = cfg.lam * float(np.sum((dn - sigmoid(magnitude_summary(params))) ** 2))
            worst = max(worst, float(_rel_err(gq[j], (fu - fd) / (2 * h))))
    return worst <= 1e-4, f"max rel err {worst:.2e} over {nets} nets"


def check_mask_cardinality(trials: int = 10, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    widths = (7, 16, 33)
    for _ in range(trials):
        q = ImportanceIndicator(rng.standard_normal(sum(widths)), widths)
        previous = None
        for s in RATIO_GRID:
            bits = derive_pattern(q, s)
            for sl, w in zip(layer_slices(widths), widths):
                expected = max(1, math.floor(s * w + 0.5))
                if int(bits[sl].sum()) != expected:
                    return False, f"s={s} width {w}: {int(bits[sl].sum())} kept, expected {expected}"
            if previous is not None and np.any(previous > bits):
                return False, f"pattern at s={s} drops a unit kept at a smaller ratio"
            previous = bits
    return True, f"{trials} score vectors x {len(RATIO_GRID)} ratios"


def check_aggregation(aggregate: Callable = default_aggregate, instances: int = 50,
                      seed: int = 0) -> tuple[bool, str]:
    """Compare ``aggregate`` against a per-element loop over clients."""
    rng = np.random.default_rng(seed)
    for t in range(instances):
        sizes = [int(rng.integers(2, 6)) for _ in range(3)]
        arch = mlp(sizes)
        omega = init_params(arch, rng, dtype=np.float64)
        reports = []
        for k in rng.permutation(int(rng.integers(1, 5))):
            bits = (rng.random(sum(sizes[1:-1])) < 0.6).astype(np.int8)
            pm = UnitMask(bits).param_mask(arch, np.float64)
            local = omega.map(lambda a: a + rng.standard_normal(a.shape))
            residual = omega.map(lambda g, p, m: (g - p) * m, local, pm)
            reports.append(ClientReport(int(k), residual, bits, int(rng.integers(1, 50)),
                                        1.0, 0.0, 1.0, 0.0, 0))
        got = aggregate(omega, reports)
        ordered = sorted(reports, key=lambda r: r.client_id)
        total = float(sum(r.sample_count for r in ordered))
        for arr_i, (g_arr, out_arr) in enumerate(zip(omega.arrays(), got.arrays())):
            expected = np.empty_like(g_arr)
            for idx in np.ndindex(g_arr.shape):
                acc = 0.0
                for r in ordered:
                    acc = acc + float(r.sample_count) * (g_arr[idx] - r.residual.arrays()[arr_i][idx])
                expected[idx] = acc / total
            if not np.array_equal(expected, out_arr):
                return False, f"instance {t}: mismatch, max diff {np.max(np.abs(expected - out_arr)):.3e}"
    return True, f"{instances} randomized instances, exact"


def check_bandit_replay(steps: int = 8, seed: int = 0) -> tuple[bool, str]:
    """Drive an agent with scripted feedback and redo every score by hand."""
    rng = np.random.default_rng(seed)
    agent = bandit.init_agent(4, 0.05, 100, 100, 0.1, 0.5, rng, initial_accuracy=40.0)
    accuracies = [45.0, 43.0, 50.0, 50.0, 48.0, 60.0, 61.0, 59.0][:steps]
    for r, acc in enumerate(accuracies, start=1):
        before = [(p.lo, p.hi, list(p.rewards)) for p in agent.partitions]
        prev_acc, s = agent.last_accuracy, agent.last_ratio
        _, trace = bandit.update_and_select(agent, acc, 0.5 + 0.1 * r, rng)
        if agent.epsilon != 2.0 ** -r:
            return False, f"step {r}: epsilon {agent.epsilon} != 2^-{r}"
        parent_lo = next(lo for lo, hi, _ in before if lo <= s < hi)
        should_drop = acc - prev_acc < 0.0 and s > parent_lo
        if trace.eliminated != should_drop:
            return False, f"step {r}: elimination flag {trace.eliminated}, expected {should_drop}"
        if not agent.partitions:
            return False, f"step {r}: partition set emptied"
        g = (bandit.utility(acc) - bandit.utility(prev_acc)) / (0.5 + 0.1 * r)
        if abs(trace.reward - g) > 1e-9:
            return False, f"step {r}: reward {trace.reward} != {g}"
        log_arg = agent.xi * (agent.xi / len(agent.partitions) ** 2) * 2.0 ** -r
        for i, p in enumerate(agent.partitions):
            n = len(p.rewards)
            mean = sum(p.rewards) / n if n else 0.0
            var = sum((x - mean) ** 2 for x in p.rewards) / n if n else 0.0
            rad = 0.5 * (var + 2.0) * math.log(log_arg) / (4.0 * (n + 1))
            score = mean + (math.sqrt(rad) if rad > 0 else 0.0)
            if abs(score - trace.scores[i]) > 1e-9 or abs(mean - trace.means[i]) > 1e-9:
                return False, f"step {r}: partition {i} score {trace.scores[i]} != {score}"
        best = max(range(len(trace.scores)), key=lambda i: (trace.scores[i], -i))
        if best != trace.selected:
            return False, f"step {r}: selected {trace.selected}, expected {best}"
        if not agent.partitions[best].contains(trace.new_ratio):
            return False, f"step {r}: sampled ratio outside the chosen partition"
    return True, f"{len(accuracies)} scripted updates"


def check_closed_forms(samples: int = 100, seed: int = 0) -> tuple[bool, str]:
    import mpmath

    mpmath.mp.dps = 40
    rng = np.random.default_rng(seed)
    if bandit.utility(0.0) != 0.0:
        return False, "U(0) != 0"
    for _ in range(samples):
        a, b = rng.uniform(0, 100, size=2)
        t = float(rng.uniform(0.01, 10))
        u = lambda x: 10 - 20 / (1 + mpmath.exp(mpmath.mpf("0.35") * mpmath.mpf(float(x))))
        ref = float((u(a) - u(b)) / mpmath.mpf(t))
        if abs(bandit.reward(float(a), float(b), t) - ref) > 1e-12:
            return False, f"reward({a}, {b}, {t}) off by {abs(bandit.reward(a, b, t) - ref):.2e}"
    return True, f"{samples} random reward triples"


def check_cost_monotone() -> tuple[bool, str]:
    arch = mlp([32, 64, 64, 10])
    q = ImportanceIndicator(np.random.default_rng(0).random(128), (64, 64))
    flops, uploads = [], []
    for s in RATIO_GRID:
        mask = build_mask(derive_pattern(q, s), arch)
        flops.append(costmodel.flops_of_round(arch, mask, 20, 10))
        uploads.append(costmodel.upload_size(mask, arch))
    if any(b < a for a, b in zip(flops, flops[1:])) or any(b < a for a, b in zip(uploads, uploads[1:])):
        return False, "cost decreases somewhere on the ratio grid"
    return True, f"FLOPs and upload monotone over {len(RATIO_GRID)} ratios"


def check_dense_equivalence() -> tuple[bool, str]:
    cfg = desk_config(rounds=10, clients=5, fraction=0.6, ratio_rule="fixed", fixed_ratio=1.0,
                      mu=0.0, lam=0.0, q_grad="ir_only", precision="float64",
                      capability_levels=[1.0], local_iters=5, per_class=40)
    sparse = [led.digest for led in run(cfg).ledgers]
    dense = fedavg_reference(cfg).digests
    if sparse != dense:
        first = next(i for i, (a, b) in enumerate(zip(sparse, dense)) if a != b)
        return False, f"trajectories diverge at round {first}"
    return True, "10 rounds, 5 clients, identical digests"


def all_checks(aggregate: Callable = default_aggregate) -> list[tuple[str, Callable]]:
    return [
        ("gradient finite differences", check_gradients),
        ("mask cardinality", check_mask_cardinality),
        ("aggregation oracle", lambda: check_aggregation(aggregate)),
        ("bandit replay", check_bandit_replay),
        ("utility and reward closed forms", check_closed_forms),
        ("cost monotone in ratio", check_cost_monotone),
        ("dense equivalence with FedAvg", check_dense_equivalence),
    ]


def run_checks(aggregate: Callable = default_aggregate) -> list[CheckResult]:
    results = []
    for name, fn in all_checks(aggregate):
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed table
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, ok, detail, time.perf_counter() - start))
    return results
