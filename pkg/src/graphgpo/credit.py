"""Advantage estimators: graph-based, episode-level, GiGPO step-level, combined."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import IO

import numpy as np

from . import kernels
from .graph import CompactGraph, DistanceMap, Edge, TransitionGraph, effective_distance
from .rollout import Outcome, StateKey, TrajectorySet, trajectory_return

__all__ = [
    "CreditParams",
    "AdvantageTable",
    "graph_step_reward",
    "build_step_groups",
    "graph_rewards",
    "graph_advantages",
    "episode_advantages",
    "gigpo_step_advantages",
    "combined_advantages",
    "write_advantage_dump",
    "CompactCredit",
    "compact_advantages",
]


@dataclass(frozen=True)
class CreditParams:
    omega: float = 0.1
    r_succ: float = 10.0
    beta_g: float = 1.0
    beta_e: float = 1.0
    gigpo_lambda: float = 0.95
    std_floor: float = 1e-8
    occurrence_weighted: bool = False

    def __post_init__(self):
        if not 0.0 < self.omega < 1.0:
            raise ValueError(f"omega must lie in (0, 1), got {self.omega}")
        if not self.r_succ > 0:
            raise ValueError("r_succ must be positive")
        if self.beta_g < 0 or self.beta_e < 0:
            raise ValueError("balancing factors must be non-negative")
        if not 0.0 < self.gigpo_lambda <= 1.0:
            raise ValueError("gigpo_lambda must lie in (0, 1]")
        if not self.std_floor > 0:
            raise ValueError("std_floor must be positive")


@dataclass
class AdvantageTable:
    edge_adv: dict[Edge, float]
    episode_adv: dict[int, float]
    step_adv: dict[tuple[int, int], float]
    gigpo_step_adv: dict[tuple[int, int], float] | None = None
    edge_reward: dict[Edge, float] | None = None


def graph_step_reward(e: Edge, dm: DistanceMap, p: CreditParams) -> float:
    return p.r_succ * p.omega ** (effective_distance(dm, e.dst) + e.cost)


def build_step_groups(g: TransitionGraph) -> dict[StateKey, list[Edge]]:
    """Out-edges of every node that has any, in first-seen order."""
    return {s: list(g.out_edges[s]) for s in g.nodes if s in g.out_edges}


def graph_rewards(g: TransitionGraph, dm: DistanceMap, p: CreditParams) -> dict[Edge, float]:
    return {e: graph_step_reward(e, dm, p) for e in g.edges}


def _graph_credit(g: TransitionGraph, dm: DistanceMap, p: CreditParams):
    """Edges in index order with their standardized rewards.

    Shares the kernel with the compact path so both give identical floats.
    """
    edges = g.edges
    if not edges:
        return edges, np.zeros(0)
    idx = g.node_index
    n = len(edges)
    src = np.fromiter((idx[e.src] for e in edges), dtype=np.int64, count=n)
    dst = np.fromiter((idx[e.dst] for e in edges), dtype=np.int64, count=n)
    cost = np.fromiter((e.cost for e in edges), dtype=np.float64, count=n)
    if p.occurrence_weighted:
        weights = np.fromiter((len(e.occurrences) for e in edges), dtype=np.float64, count=n)
    else:
        weights = np.ones(n)
    dist = np.fromiter((dm.dist[s] for s in g.nodes), dtype=np.float64, count=len(g.nodes))
    adv, _ = kernels.graph_edge_advantages(len(g.nodes), src, dst, cost, weights, dist, p.omega, p.r_succ, p.std_floor)
    return edges, adv


def graph_advantages(g: TransitionGraph, dm: DistanceMap, p: CreditParams) -> dict[Edge, float]:
    """Group-standardized graph rewards, one value per unique edge.

    Groups are the out-edges of each node. Standardization is invariant to
    scaling a group's rewards, so each group is evaluated as
    ``r_succ * omega**(x - x_min)`` with ``x_min`` the group's smallest
    exponent. This keeps far-from-goal groups from underflowing below
    ``std_floor`` while producing the same advantages.
    """
    edges, adv = _graph_credit(g, dm, p)
    return dict(zip(edges, adv.tolist()))


def _normalize_flat(values: list[float], std_floor: float) -> list[float]:
    if len(values) < 2:
        return [0.0] * len(values)
    arr = np.asarray(values, dtype=np.float64)
    return kernels.group_normalize(arr, np.array([0, len(arr)]), np.ones(len(arr)), std_floor).tolist()


def episode_advantages(tset: TrajectorySet, std_floor: float = 1e-8) -> dict[int, float]:
    returns = [trajectory_return(t, tset.r_succ) for t in tset.trajectories]
    return dict(enumerate(_normalize_flat(returns, std_floor)))


def _gigpo_rewards(returns, lengths, step_traj, step_t, lam) -> np.ndarray:
    k = np.asarray(lengths, dtype=np.float64)[step_traj] - (step_t + 1)
    return np.power(lam, k) * np.asarray(returns, dtype=np.float64)[step_traj]


def gigpo_step_advantages(tset: TrajectorySet, g: TransitionGraph, p: CreditParams) -> dict[tuple[int, int], float]:
    """Step-level advantages grouping every step by its origin state.

    Each step's reward is ``lambda**(T_m - t) * R(tau_m)`` with ``t`` 1-based
    and ``T_m`` the length of its own trajectory.
    """
    idx = g.node_index
    occ, keys, traj_of, t_of = [], [], [], []
    for m, traj in enumerate(tset.trajectories):
        for t, step in enumerate(traj.steps):
            occ.append((m, t))
            keys.append(idx[step.state])
            traj_of.append(m)
            t_of.append(t)
    returns = [trajectory_return(t, tset.r_succ) for t in tset.trajectories]
    values = _gigpo_rewards(
        returns, [len(t) for t in tset.trajectories], np.array(traj_of), np.array(t_of), p.gigpo_lambda
    )
    adv = kernels.keyed_normalize(np.array(keys, dtype=np.int64), len(g.nodes), values, p.std_floor)
    return dict(zip(occ, adv.tolist()))


def combined_advantages(
    tset: TrajectorySet,
    g: TransitionGraph,
    dm: DistanceMap,
    p: CreditParams,
    step_signal: str = "graph",
) -> AdvantageTable:
    """Per-step advantage ``beta_g * step_term + beta_e * A^E``.

    ``step_signal="graph"`` uses the graph advantage of the step's edge;
    ``"gigpo"`` swaps in the GiGPO step-level advantage.
    """
    if step_signal not in ("graph", "gigpo"):
        raise ValueError(f"unknown step signal {step_signal!r}")
    order, adv = _graph_credit(g, dm, p)
    edge_adv = dict(zip(order, adv.tolist()))
    edge_reward = graph_rewards(g, dm, p)
    ep_adv = episode_advantages(tset, p.std_floor)
    gigpo = gigpo_step_advantages(tset, g, p) if step_signal == "gigpo" else None
    bg, be = p.beta_g, p.beta_e
    ep_term = {m: be * a for m, a in ep_adv.items()}
    step_adv: dict[tuple[int, int], float] = {}
    if gigpo is None:
        for e, a_g in zip(order, adv.tolist()):
            g_term = bg * a_g
            for occ in e.occurrences:
                step_adv[occ] = g_term + ep_term[occ[0]]
    else:
        for occ, a_s in gigpo.items():
            step_adv[occ] = bg * a_s + ep_term[occ[0]]
    return AdvantageTable(
        edge_adv=edge_adv,
        episode_adv=ep_adv,
        step_adv=step_adv,
        gigpo_step_adv=gigpo,
        edge_reward=edge_reward,
    )


@dataclass
class CompactCredit:
    """Advantages aligned with :class:`CompactGraph` step and edge order."""

    step_adv: np.ndarray
    edge_adv: np.ndarray
    episode_adv: list[float]
    gigpo_step_adv: np.ndarray | None = None


def compact_advantages(tset: TrajectorySet, cg: CompactGraph, p: CreditParams, step_signal: str = "graph") -> CompactCredit:
    """Array form of :func:`combined_advantages`; same values, no per-edge objects."""
    if step_signal not in ("graph", "gigpo"):
        raise ValueError(f"unknown step signal {step_signal!r}")
    values = None
    if step_signal == "gigpo":
        returns = np.where(cg.success.astype(bool), tset.r_succ, 0.0) + cg.penalties
        lengths = [len(t) for t in tset.trajectories]
        values = _gigpo_rewards(returns, lengths, cg.step_traj, cg.step_t, p.gigpo_lambda)
    weights = cg.edge_counts().astype(np.float64) if p.occurrence_weighted else None
    step_adv, edge_adv, ep, term = kernels.compact_credit(
        len(cg.nodes), cg.step_src, cg.step_dst, cg.step_cost, cg.step_traj, cg.edge_of_step, cg.edge_first,
        cg.dist, weights, cg.success, cg.penalties, tset.r_succ, p.omega, p.r_succ, p.std_floor, p.beta_g, p.beta_e, values,
    )
    return CompactCredit(step_adv, edge_adv, ep.tolist(), term)


def write_advantage_dump(tset: TrajectorySet, g: TransitionGraph, table: AdvantageTable, sink: IO[str]) -> int:
    """One line per step occurrence, ordered by (m, t)."""
    rows = []
    for e in g.edges:
        for m, t in e.occurrences:
            rows.append((m, t, e))
    rows.sort(key=lambda r: (r[0], r[1]))
    for m, t, e in rows:
        rec = {
            "m": m,
            "t": t,
            "edge": e.summary(),
            "R_G": table.edge_reward[e] if table.edge_reward else None,
            "A_G": table.edge_adv[e],
            "A_E": table.episode_adv[m],
            "A": table.step_adv[(m, t)],
        }
        sink.write(json.dumps(rec, separators=(",", ":")) + "\n")
    return len(rows)
