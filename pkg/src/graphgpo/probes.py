"""Oracle and property probes: Bellman-Ford distances, monotonicity, variance."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .credit import CreditParams, graph_advantages, graph_step_reward
from .graph import DistanceMap, TransitionGraph, effective_distance, graph_from_edges
from .rollout import Outcome, canonical_state_key, trajectory_return

__all__ = [
    "brute_force_distances",
    "monotonicity_probe",
    "random_graph",
    "EdgeVarianceReport",
    "variance_probe",
    "format_variance_report",
]


def brute_force_distances(g: TransitionGraph) -> DistanceMap:
    """Bellman-Ford relaxation to a fixpoint; independent of the Dijkstra path."""
    dist = {s: (0.0 if s in g.goal_nodes else math.inf) for s in g.nodes}
    for _ in range(len(g.nodes) + 1):
        changed = False
        for e in g.edges:
            cand = e.cost + dist[e.dst]
            if cand < dist[e.src]:
                dist[e.src] = cand
                changed = True
        if not changed:
            break
    finite = [d for d in dist.values() if d != math.inf]
    return DistanceMap(dist=dist, d_max=max(finite) if finite else 0.0)


def monotonicity_probe(g: TransitionGraph, dm: DistanceMap, p: CreditParams) -> list[tuple]:
    """Every in-group edge pair whose advantage order contradicts its distance order.

    A pair (good, bad) is checked when ``d(good.dst) + good.cost`` is strictly
    smaller than the same quantity for ``bad``; the probe reports it unless
    ``A^G(good) > A^G(bad)``.
    """
    adv = graph_advantages(g, dm, p)
    violations = []
    for edges in g.out_edges.values():
        scored = [(effective_distance(dm, e.dst) + e.cost, e) for e in edges]
        for x_good, good in scored:
            for x_bad, bad in scored:
                if x_good < x_bad and not adv[good] > adv[bad]:
                    violations.append((good, bad, adv[good], adv[bad]))
    return violations


def random_graph(rng: np.random.Generator, max_nodes: int = 12, costs=(1, 2, 3), p_edge: float = 0.25) -> TransitionGraph:
    """Random directed multigraph with 0-2 goal nodes, for oracle cross-checks."""
    n = int(rng.integers(1, max_nodes + 1))
    keys = [canonical_state_key([("node", i)]) for i in range(n)]
    edges = []
    n_actions = 3
    for i in range(n):
        for j in range(n):
            if rng.random() < p_edge:
                edges.append((keys[i], int(rng.integers(n_actions)), keys[j], float(rng.choice(costs))))
    n_goals = int(rng.integers(0, min(2, n) + 1))
    goals = [keys[i] for i in rng.choice(n, size=n_goals, replace=False)] if n_goals else []
    return graph_from_edges(edges, goal_nodes=goals, extra_nodes=keys)


@dataclass
class EdgeVarianceReport:
    edge: tuple
    visits: int
    successes: int
    failures: int
    batches: int
    max_batch_var_graph: float
    mean_batch_var_grpo: float
    mean_batch_var_gigpo: float
    pooled_var_graph: float
    pooled_var_grpo: float
    pooled_var_gigpo: float
    violations: int

    @property
    def holds(self) -> bool:
        return self.violations == 0


def _pvar(xs) -> float:
    arr = np.asarray(xs, dtype=np.float64)
    if len(arr) < 2 or arr.min() == arr.max():
        return 0.0  # exact, np.var leaves rounding residue on constant input
    return float(np.var(arr))


def variance_probe(
    env,
    pol,
    n_rollouts: int,
    p: CreditParams,
    group_size: int = 8,
    task_seed: int = 0,
    seed: int = 0,
    min_visits: int = 30,
    tol: float = 1e-12,
) -> list[EdgeVarianceReport]:
    """Conditional variance of graph-style vs trajectory-style step feedback.

    Draws ``n_rollouts`` independent groups from a fixed policy and builds one
    graph per group. For every edge, per-group variances of ``R^G`` and of
    ``eta(t) R(tau)`` (eta = 1 and eta = lambda**(T-t)) are compared over the
    edge's occurrences in that group. Only edges visited at least
    ``min_visits`` times by both successful and failed trajectories are
    reported.
    """
    from .graph import aggregate, compute_distances
    from .harness import _PolicyCache, rollout_group

    rng = np.random.default_rng(seed)
    cache = _PolicyCache(pol)
    lam = p.gigpo_lambda

    xg_all = defaultdict(list)
    xs_grpo_all = defaultdict(list)
    xs_gigpo_all = defaultdict(list)
    outcomes = defaultdict(lambda: [0, 0])
    batch_var = defaultdict(list)  # edge -> [(var_g, var_grpo, var_gigpo)]

    for _ in range(n_rollouts):
        tset = rollout_group(env, cache, group_size, None, rng, task_seed=task_seed, r_succ=p.r_succ)
        g = aggregate(tset)
        dm = compute_distances(g)
        returns = [trajectory_return(t, tset.r_succ) for t in tset.trajectories]
        for e in g.edges:
            rg = graph_step_reward(e, dm, p)
            xg, xs1, xs2 = [], [], []
            for m, t in e.occurrences:
                traj = tset.trajectories[m]
                xg.append(rg)
                xs1.append(returns[m])
                xs2.append(lam ** (len(traj) - (t + 1)) * returns[m])
                outcomes[e.key][0 if traj.outcome is Outcome.SUCCESS else 1] += 1
            xg_all[e.key].extend(xg)
            xs_grpo_all[e.key].extend(xs1)
            xs_gigpo_all[e.key].extend(xs2)
            batch_var[e.key].append((_pvar(xg), _pvar(xs1), _pvar(xs2)))

    reports = []
    for key, (succ, fail) in outcomes.items():
        if succ + fail < min_visits or succ == 0 or fail == 0:
            continue
        per_batch = np.asarray(batch_var[key])
        bad = int(np.sum((per_batch[:, 0] > per_batch[:, 1] + tol) | (per_batch[:, 0] > per_batch[:, 2] + tol)))
        reports.append(
            EdgeVarianceReport(
                edge=key,
                visits=succ + fail,
                successes=succ,
                failures=fail,
                batches=len(per_batch),
                max_batch_var_graph=float(per_batch[:, 0].max()),
                mean_batch_var_grpo=float(per_batch[:, 1].mean()),
                mean_batch_var_gigpo=float(per_batch[:, 2].mean()),
                pooled_var_graph=_pvar(xg_all[key]),
                pooled_var_grpo=_pvar(xs_grpo_all[key]),
                pooled_var_gigpo=_pvar(xs_gigpo_all[key]),
                violations=bad,
            )
        )
    reports.sort(key=lambda r: (r.edge[0].bytes, r.edge[1], r.edge[2].bytes))
    return reports


def format_variance_report(reports: list[EdgeVarianceReport]) -> str:
    head = f"{'edge':<44} {'visits':>6} {'succ':>5} {'batchVarG':>10} {'VarS_grpo':>10} {'VarS_gigpo':>10} {'poolVarG':>10} ok"
    lines = [head, "-" * len(head)]
    for r in reports:
        src, action, dst, cost = r.edge
        name = f"{src.short(18)} -{action}-> {dst.short(18)}"
        lines.append(
            f"{name:<44} {r.visits:>6} {r.successes:>5} {r.max_batch_var_graph:>10.3g} "
            f"{r.pooled_var_grpo:>10.3g} {r.pooled_var_gigpo:>10.3g} {r.pooled_var_graph:>10.3g} "
            f"{'yes' if r.holds else 'NO'}"
        )
    return "\n".join(lines)
