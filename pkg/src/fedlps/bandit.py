"""Per-client ratio agent: partitioned continuous arms with variance-aware UCB.

Each agent owns half-open intervals over the sparse-ratio range.  Every update
splits the interval that produced the last ratio, optionally drops its lower
piece when accuracy fell, scores all intervals and samples the next ratio from
the best one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UTILITY_SLOPE = 0.35


class BanditConfigError(ValueError):
    pass


def utility(a: float) -> float:
    """Accuracy transform on the percent scale: ``10 - 20 / (1 + exp(0.35 a))``."""
    return 10.0 - 20.0 / (1.0 + math.exp(UTILITY_SLOPE * a))


def reward(a_r: float, a_prev: float, t_cost: float) -> float:
    if t_cost <= 0:
        raise BanditConfigError(f"time cost must be positive, got {t_cost}")
    return (utility(a_r) - utility(a_prev)) / t_cost


@dataclass
class Partition:
    lo: float
    hi: float
    rewards: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.lo < self.hi:
            raise BanditConfigError(f"empty partition [{self.lo}, {self.hi})")

    @property
    def pulls(self) -> int:
        return len(self.rewards)

    def contains(self, s: float) -> bool:
        return self.lo <= s < self.hi

    def mean(self) -> float:
        return float(np.mean(self.rewards)) if self.rewards else 0.0

    def variance(self) -> float:
        # population variance
        return float(np.var(self.rewards)) if self.rewards else 0.0

    def to_dict(self) -> dict:
        r = np.asarray(self.rewards, dtype=np.float64)
        return {"lo": self.lo, "hi": self.hi, "pulls": self.pulls,
                "reward_sum": float(r.sum()), "reward_sumsq": float((r * r).sum())}


@dataclass
class StepTrace:
    """Everything one update computed; kept for auditing and replay tests."""

    reward: float
    eliminated: bool
    means: list[float]
    variances: list[float]
    scores: list[float]
    selected: int
    new_ratio: float
    log_floored: bool


@dataclass
class BanditAgent:
    partitions: list[Partition]
    xi: float
    psi: float
    rho: float = 0.5
    epsilon: float = 1.0
    last_ratio: float = 1.0
    last_accuracy: float = 0.0
    delta: float = 0.0
    eliminate: str = "lower"
    split_stats: str = "inherit"
    updates: int = 0
    eliminations: int = 0
    log_floor_count: int = 0

    @property
    def partition_count(self) -> int:
        return len(self.partitions)

    def locate(self, s: float) -> int:
        for i, p in enumerate(self.partitions):
            if p.contains(s):
                return i
        raise BanditConfigError(f"ratio {s} lies in no partition")

    def scores(self) -> tuple[list[float], list[float], list[float], bool]:
        log_arg = self.xi * self.psi * self.epsilon
        log_term = math.log(log_arg) if log_arg > 0 else -math.inf
        floored = log_term < 0
        means, variances, scores = [], [], []
        for p in self.partitions:
            g, v = p.mean(), p.variance()
            radicand = self.rho * (v + 2.0) * log_term / (4.0 * (p.pulls + 1))
            bonus = math.sqrt(radicand) if radicand > 0 else 0.0
            means.append(g)
            variances.append(v)
            scores.append(g + bonus)
        return means, variances, scores, floored

    def to_dict(self) -> dict:
        return {
            "partitions": [p.to_dict() for p in self.partitions],
            "epsilon": self.epsilon, "xi": self.xi, "psi": self.psi, "rho": self.rho,
            "last_ratio": self.last_ratio, "last_accuracy": self.last_accuracy,
            "updates": self.updates, "eliminations": self.eliminations,
            "log_floor_count": self.log_floor_count,
        }


def init_agent(i0: int, s_min: float, rounds: int, clients: int, fraction: float,
               rho: float, rng: np.random.Generator, *, delta: float = 0.0,
               eliminate: str = "lower", split_stats: str = "inherit",
               initial_accuracy: float = 0.0) -> BanditAgent:
    """Equal-width partitions over ``[s_min, 1)`` and a first ratio from a random one."""
    if i0 < 1:
        raise BanditConfigError("need at least one initial partition")
    if eliminate not in ("lower", "upper") or split_stats not in ("inherit", "fresh"):
        raise BanditConfigError(f"bad agent options eliminate={eliminate!r} split_stats={split_stats!r}")
    edges = np.linspace(s_min, 1.0, i0 + 1)
    partitions = [Partition(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:])]
    xi = rounds / (clients * fraction)
    agent = BanditAgent(partitions, xi=xi, psi=xi / i0 ** 2, rho=rho, delta=delta,
                        eliminate=eliminate, split_stats=split_stats,
                        last_accuracy=initial_accuracy)
    first = partitions[int(rng.integers(i0))]
    agent.last_ratio = float(rng.uniform(first.lo, first.hi))
    return agent


def update_and_select(agent: BanditAgent, accuracy: float, t_cost: float,
                      rng: np.random.Generator) -> tuple[float, StepTrace]:
    """One round of feedback for ``agent``; mutates it and returns the next ratio.

    ``accuracy`` is the client's average training accuracy (percent) for the
    ratio ``agent.last_ratio``; ``t_cost`` is its simulated local time.
    """
    u = agent.locate(agent.last_ratio)
    parent = agent.partitions[u]
    s = agent.last_ratio

    def child(lo, hi):
        return Partition(lo, hi, list(parent.rewards) if agent.split_stats == "inherit" else [])

    lower = child(parent.lo, s) if s > parent.lo else None
    upper = child(s, parent.hi)
    # the piece dropped on elimination, and the piece that always survives
    removable, kept = (lower, upper) if agent.eliminate == "lower" else (upper, lower)

    eliminated = False
    if accuracy - agent.last_accuracy < agent.delta and removable is not None:
        if kept is not None or len(agent.partitions) > 1:
            eliminated = True
    pieces = [p for p in (lower, upper) if p is not None and not (eliminated and p is removable)]
    agent.partitions[u:u + 1] = pieces
    if eliminated:
        agent.eliminations += 1

    agent.epsilon /= 2.0
    agent.psi = agent.xi / agent.partition_count ** 2

    g = reward(accuracy, agent.last_accuracy, t_cost)
    for p in pieces:
        p.rewards.append(g)

    means, variances, scores, floored = agent.scores()
    if floored:
        agent.log_floor_count += 1
    best = int(np.argmax(scores))  # first maximum wins ties
    chosen = agent.partitions[best]
    new_ratio = float(rng.uniform(chosen.lo, chosen.hi))
    agent.last_ratio = new_ratio
    agent.last_accuracy = accuracy
    agent.updates += 1
    return new_ratio, StepTrace(g, eliminated, means, variances, scores, best, new_ratio, floored)
