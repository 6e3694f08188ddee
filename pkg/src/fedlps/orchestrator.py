"""Server loop: sampling, local updates, weighted aggregation, ratio decisions.

All randomness comes from independent streams keyed by (purpose, client, round)
under one master seed, and client updates are pure functions, so results do
not depend on how many worker threads run them.
"""
from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bandit, costmodel
from .config import RunConfig
from .data import (Dataset, PartitionPlan, assign_capabilities, load_idx, pathological_partition,
                   read_csv, synth_dataset)
from .localtrain import (ClientReport, ClientState, LossConfig, client_update, current_pattern,
                         evaluate, heuristic_pattern, initial_importance)
from .netcore import LayerSpec, ParamSet, init_params, mlp, save_checkpoint
from .sparsity import build_mask, clamp_ratio, hidden_widths

log = logging.getLogger(__name__)

# stream purposes
DATA, PARTITION, CAPABILITY, INIT, SELECT, CLIENT, BANDIT_INIT, BANDIT, JITTER, EVAL = range(10)

METRIC_COLUMNS = ("round", "mean_test_acc", "cumulative_flops", "cumulative_sim_time",
                  "mean_ratio", "mean_reward", "eliminated_partitions", "log_floor_count",
                  "mean_l_tr", "mean_l_pr", "mean_l_ir")


class AggregationError(ValueError):
    pass


def stream(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, *keys])


def params_digest(params: ParamSet) -> str:
    h = hashlib.sha256()
    for a in params.arrays():
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def select_clients(clients: int, fraction: float, rng: np.random.Generator) -> list[int]:
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    c = max(math.floor(fraction * clients + 1e-9), 1)
    return sorted(int(k) for k in rng.choice(clients, size=c, replace=False))


def aggregate(global_params: ParamSet, reports: Sequence[ClientReport]) -> ParamSet:
    """Sample-weighted mean of ``global - residual_k``, reduced in client-id order."""
    if not reports:
        raise AggregationError("no reports to aggregate")
    ordered = sorted(reports, key=lambda r: r.client_id)
    total = float(sum(r.sample_count for r in ordered))
    if total <= 0:
        raise AggregationError("total sample count is zero")
    acc = global_params.zeros_like()
    for r in ordered:
        n = float(r.sample_count)
        acc = acc.map(lambda a, g, d: a + n * (g - d), global_params, r.residual)
    return acc.map(lambda a: a / total)


@dataclass
class LedgerEntry:
    client_id: int
    ratio_sampled: float
    ratio_effective: float
    local_cost: float
    train_accuracy: float
    reward: float | None
    flops: float
    upload: int
    eliminated: bool = False


@dataclass
class RoundLedger:
    round: int
    selected: list[int]
    entries: list[LedgerEntry]
    global_cost: float
    digest: str

    def to_dict(self) -> dict:
        return {"round": self.round, "selected": self.selected, "global_cost": self.global_cost,
                "digest": self.digest, "entries": [vars(e) for e in self.entries]}


@dataclass
class Setup:
    """Everything derived from the config before round 0."""

    cfg: RunConfig
    dataset: Dataset
    plan: PartitionPlan
    arch: list[LayerSpec]
    capabilities: np.ndarray
    params: ParamSet

    def client_data(self, k: int) -> tuple[Dataset, Dataset]:
        test = self.plan.test[k]
        return (self.dataset.subset(self.plan.train[k]),
                self.dataset.subset(test) if len(test) else self.dataset.subset(self.plan.train[k]))


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset == "idx":
        return load_idx(cfg.idx_images, cfg.idx_labels, cfg.classes)
    if cfg.dataset == "csv":
        if not Path(cfg.csv_path).exists():
            raise FileNotFoundError(f"dataset file not found: {cfg.csv_path}")
        return read_csv(cfg.csv_path, cfg.classes)
    return synth_dataset(cfg.classes, cfg.dim, cfg.per_class, cfg.sep, stream(cfg.seed, DATA))


def build_setup(cfg: RunConfig) -> Setup:
    ds = load_dataset(cfg)
    plan = pathological_partition(ds, cfg.clients, cfg.classes_per_client, cfg.test_fraction,
                                  stream(cfg.seed, PARTITION))
    arch = mlp([ds.dim, *[int(h) for h in cfg.hidden], ds.class_count])
    z = assign_capabilities(cfg.clients, cfg.capability_levels, stream(cfg.seed, CAPABILITY))
    params = init_params(arch, stream(cfg.seed, INIT), dtype=cfg.dtype)
    return Setup(cfg, ds, plan, arch, z, params)


def loss_config(cfg: RunConfig) -> LossConfig:
    return LossConfig(mu=cfg.mu, lam=cfg.lam, lr=cfg.lr, local_iters=cfg.local_iters,
                      batch_size=cfg.batch_size, grad_clip=cfg.grad_clip or None,
                      q_grad=cfg.q_grad, accuracy_source=cfg.accuracy_source)


@dataclass
class RunResult:
    config: RunConfig
    params: ParamSet
    ledgers: list[RoundLedger]
    metrics: list[dict]
    states: list[ClientState]
    agents: list[bandit.BanditAgent | None]
    ratios: list[float]
    initial_accuracy: list[float]
    final_accuracy: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    @property
    def total_flops(self) -> float:
        return self.metrics[-1]["cumulative_flops"] if self.metrics else 0.0

    @property
    def total_time(self) -> float:
        return self.metrics[-1]["cumulative_sim_time"] if self.metrics else 0.0

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "rounds": [led.to_dict() for led in self.ledgers],
            "initial_accuracy": self.initial_accuracy,
            "final_accuracy": self.final_accuracy,
            "final_mean_accuracy": float(np.mean(self.final_accuracy)) if self.final_accuracy else None,
            "total_sim_time": self.total_time,
            "total_flops": self.total_flops,
            "final_digest": params_digest(self.params),
            "agents": [a.to_dict() if a is not None else None for a in self.agents],
            "checkpoints": self.checkpoints,
        }


def client_eval_accuracy(setup: Setup, state: ClientState, global_params: ParamSet,
                         ratio: float, round_index: int) -> float:
    """Test accuracy of the client's personalized model, or of the global model
    under the client's current pattern if it was never selected."""
    if state.personal is not None:
        return evaluate(state.personal, state.test, setup.arch)
    cfg = setup.cfg
    s_eff = min(ratio, state.capability)
    if cfg.pattern == "random":
        bits = heuristic_pattern("random", global_params, s_eff, state.q.widths,
                                 stream(cfg.seed, EVAL, state.client_id, round_index))
    else:
        fixed = heuristic_pattern("ordered", global_params, s_eff, state.q.widths)
        bits = current_pattern(cfg.pattern, global_params, state.q, s_eff, fixed)
    return evaluate(global_params, state.test, setup.arch, build_mask(bits, setup.arch))


def initial_ratio(cfg: RunConfig, z: float, agent) -> float:
    if cfg.ratio_rule == "pucbv":
        return agent.last_ratio
    if cfg.ratio_rule == "rcr":
        return clamp_ratio(z, cfg.s_min)
    return cfg.fixed_ratio


def run(cfg: RunConfig, out_dir=None, setup: Setup | None = None) -> RunResult:
    setup = setup or build_setup(cfg)
    arch = setup.arch
    widths = hidden_widths(arch)
    lcfg = loss_config(cfg)
    omega = setup.params.copy()

    states, agents, ratios, initial_acc = [], [], [], []
    for k in range(cfg.clients):
        train, test = setup.client_data(k)
        a0 = evaluate(omega, train, arch)
        initial_acc.append(a0)
        states.append(ClientState(k, initial_importance(omega, widths), float(setup.capabilities[k]),
                                  train, test, last_accuracy=a0))
        agent = None
        if cfg.ratio_rule == "pucbv":
            agent = bandit.init_agent(cfg.i0, cfg.s_min, max(cfg.rounds, 1), cfg.clients, cfg.fraction,
                                      cfg.rho, stream(cfg.seed, BANDIT_INIT, k), delta=cfg.delta,
                                      eliminate=cfg.eliminate, split_stats=cfg.split_stats,
                                      initial_accuracy=a0)
        agents.append(agent)
        ratios.append(initial_ratio(cfg, float(setup.capabilities[k]), agent))

    ledgers, metrics, checkpoints = [], [], []
    cum_flops = cum_time = 0.0
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for r in range(cfg.rounds):
            selected = select_clients(cfg.clients, cfg.fraction, stream(cfg.seed, SELECT, r))

            def task(k, omega=omega, r=r):
                profile = costmodel.DeviceProfile.for_level(states[k].capability, cfg.flops_ref,
                                                            cfg.bandwidth_ref)
                if cfg.dynamic_capability:
                    profile = profile.jittered(stream(cfg.seed, JITTER, k, r))
                return client_update(states[k], omega, ratios[k], lcfg, arch, profile,
                                     stream(cfg.seed, CLIENT, k, r), alpha=cfg.alpha,
                                     pattern=cfg.pattern, round_index=r)

            outputs = list(pool.map(task, selected)) if pool else [task(k) for k in selected]
            reports = [rep for rep, _ in outputs]
            omega = aggregate(omega, reports)

            entries = []
            for k, (rep, new_state) in zip(selected, outputs):
                sampled = ratios[k]
                states[k] = new_state
                g, eliminated = None, False
                if agents[k] is not None:
                    ratios[k], trace = bandit.update_and_select(
                        agents[k], rep.train_accuracy, rep.local_cost, stream(cfg.seed, BANDIT, k, r))
                    g, eliminated = trace.reward, trace.eliminated
                entries.append(LedgerEntry(k, sampled, rep.ratio_effective, rep.local_cost,
                                           rep.train_accuracy, g, rep.flops, rep.upload, eliminated))
            t_round = costmodel.global_cost(rep.local_cost for rep in reports)
            ledgers.append(RoundLedger(r, selected, entries, t_round, params_digest(omega)))

            cum_flops += sum(rep.flops for rep in reports)
            cum_time += t_round
            accs = [client_eval_accuracy(setup, states[k], omega, ratios[k], r)
                    for k in range(cfg.clients)]
            rewards = [e.reward for e in entries if e.reward is not None]
            metrics.append({
                "round": r,
                "mean_test_acc": float(np.mean(accs)),
                "cumulative_flops": cum_flops,
                "cumulative_sim_time": cum_time,
                "mean_ratio": float(np.mean([rep.ratio_effective for rep in reports])),
                "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
                "eliminated_partitions": sum(a.eliminations for a in agents if a is not None),
                "log_floor_count": sum(a.log_floor_count for a in agents if a is not None),
                "mean_l_tr": float(np.mean([rep.loss_terms["l_tr"] for rep in reports])),
                "mean_l_pr": float(np.mean([rep.loss_terms["l_pr"] for rep in reports])),
                "mean_l_ir": float(np.mean([rep.loss_terms["l_ir"] for rep in reports])),
            })
            log.debug("round %d acc %.2f", r, metrics[-1]["mean_test_acc"])

            if out_dir is not None and cfg.checkpoint_every and (r + 1) % cfg.checkpoint_every == 0:
                path = Path(out_dir) / f"ckpt_{r + 1:04d}.bin"
                save_checkpoint(path, omega, arch)
                checkpoints.append(path.name)
    finally:
        if pool:
            pool.shutdown()

    final_acc = [client_eval_accuracy(setup, states[k], omega, ratios[k], cfg.rounds)
                 for k in range(cfg.clients)]
    return RunResult(cfg, omega, ledgers, metrics, states, agents, ratios, initial_acc,
                     final_acc, checkpoints)
