"""State-transition graph aggregation and cost-to-goal distances."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from . import kernels
from .rollout import Outcome, StateKey, TrajectorySet

__all__ = [
    "Edge",
    "TransitionGraph",
    "DistanceMap",
    "AggregationError",
    "aggregate",
    "graph_from_edges",
    "compute_distances",
    "effective_distance",
    "export_dot",
    "dump_graph",
    "CompactGraph",
    "compact_graph",
]

UNREACHABLE = math.inf


class AggregationError(ValueError):
    pass


@dataclass(eq=False)
class Edge:
    """A deduplicated transition (src, action, dst, cost).

    ``occurrences`` lists every (trajectory index, step index) where the
    transition was observed. Edges hash by identity; the graph guarantees one
    Edge object per distinct tuple.
    """

    src: StateKey
    action: int
    dst: StateKey
    cost: float
    index: int
    occurrences: list[tuple[int, int]] = field(default_factory=list)

    @property
    def key(self):
        return (self.src, self.action, self.dst, self.cost)

    def summary(self) -> str:
        return f"{self.src.short()} -[{self.action}:{self.cost:g}]-> {self.dst.short()}"


@dataclass
class TransitionGraph:
    nodes: list[StateKey]
    edges: list[Edge]
    out_edges: dict[StateKey, list[Edge]]
    goal_nodes: frozenset[StateKey]
    fail_terminals: frozenset[StateKey]
    initial_nodes: frozenset[StateKey]
    node_index: dict[StateKey, int]

    def __len__(self):
        return len(self.nodes)

    def edge_for(self, src: StateKey, action: int, dst: StateKey, cost: float = 1.0) -> Edge:
        for e in self.out_edges.get(src, ()):
            if e.action == action and e.dst == dst and e.cost == cost:
                return e
        raise KeyError((src, action, dst, cost))


def aggregate(tset: TrajectorySet) -> TransitionGraph:
    """Merge all trajectories of one rollout group into a single graph."""
    node_index: dict[StateKey, int] = {}
    nodes: list[StateKey] = []
    edge_map: dict[tuple, Edge] = {}
    edges: list[Edge] = []
    out_edges: dict[StateKey, list[Edge]] = {}
    goals: set[StateKey] = set()
    fails: set[StateKey] = set()
    initial: set[StateKey] = set()

    def add_node(s):
        if s not in node_index:
            node_index[s] = len(nodes)
            nodes.append(s)

    get_edge = edge_map.get
    for m, traj in enumerate(tset.trajectories):
        steps = traj.steps
        first = steps[0].state
        initial.add(first)
        add_node(first)
        for t, step in enumerate(steps):
            src = step.state
            key = (src, step.action, step.next_state, step.cost)
            edge = get_edge(key)
            if edge is None:
                add_node(key[2])
                edge = Edge(src, key[1], key[2], key[3], len(edges))
                edge_map[key] = edge
                edges.append(edge)
                bucket = out_edges.get(src)
                if bucket is None:
                    out_edges[src] = [edge]
                else:
                    bucket.append(edge)
            edge.occurrences.append((m, t))
        if traj.outcome is Outcome.SUCCESS:
            goals.add(steps[-1].next_state)
        else:
            fails.add(steps[-1].next_state)

    clash = goals & fails
    if clash:
        raise AggregationError(
            f"{len(clash)} node(s) marked both goal and failure terminal, e.g. {next(iter(clash))!r}"
        )
    return TransitionGraph(
        nodes=nodes,
        edges=edges,
        out_edges=out_edges,
        goal_nodes=frozenset(goals),
        fail_terminals=frozenset(fails),
        initial_nodes=frozenset(initial),
        node_index=node_index,
    )


def graph_from_edges(
    edges,
    goal_nodes=(),
    fail_terminals=(),
    initial_nodes=(),
    extra_nodes=(),
) -> TransitionGraph:
    """Build a graph directly from ``(src, action, dst, cost)`` tuples.

    Duplicate tuples collapse into one edge. Occurrences are left empty; this
    is for oracle checks and hand-built graphs, not rollout data.
    """
    node_index: dict[StateKey, int] = {}
    nodes: list[StateKey] = []
    for s in list(initial_nodes) + list(extra_nodes):
        if s not in node_index:
            node_index[s] = len(nodes)
            nodes.append(s)
    edge_list: list[Edge] = []
    seen: dict[tuple, Edge] = {}
    out_edges: dict[StateKey, list[Edge]] = {}
    for src, action, dst, cost in edges:
        if not cost > 0:
            raise ValueError(f"edge cost must be positive, got {cost}")
        for s in (src, dst):
            if s not in node_index:
                node_index[s] = len(nodes)
                nodes.append(s)
        key = (src, action, dst, float(cost))
        if key in seen:
            continue
        e = Edge(src, action, dst, float(cost), len(edge_list))
        seen[key] = e
        edge_list.append(e)
        out_edges.setdefault(src, []).append(e)
    for s in list(goal_nodes) + list(fail_terminals):
        if s not in node_index:
            node_index[s] = len(nodes)
            nodes.append(s)
    goals, fails = frozenset(goal_nodes), frozenset(fail_terminals)
    if goals & fails:
        raise AggregationError("a node cannot be both goal and failure terminal")
    return TransitionGraph(nodes, edge_list, out_edges, goals, fails, frozenset(initial_nodes), node_index)


@dataclass(frozen=True)
class DistanceMap:
    dist: dict[StateKey, float]
    d_max: float

    @property
    def effective_unreachable(self) -> float:
        return self.d_max + 1.0

    def __contains__(self, s):
        return s in self.dist

    def __getitem__(self, s):
        return self.dist[s]

    def is_reachable(self, s: StateKey) -> bool:
        return self.dist[s] != UNREACHABLE


def _node_ranks(nodes: list[StateKey]) -> np.ndarray:
    """Position of each node when sorted by key bytes (Dijkstra tie-break)."""
    order = sorted(range(len(nodes)), key=nodes.__getitem__)
    rank = np.empty(len(nodes), dtype=np.int64)
    rank[order] = np.arange(len(nodes), dtype=np.int64)
    return rank


def graph_arrays(g: TransitionGraph):
    """Integer edge arrays (src, dst, cost) in edge-index order."""
    idx = g.node_index
    n = len(g.edges)
    src = np.fromiter((idx[e.src] for e in g.edges), dtype=np.int64, count=n)
    dst = np.fromiter((idx[e.dst] for e in g.edges), dtype=np.int64, count=n)
    cost = np.fromiter((e.cost for e in g.edges), dtype=np.float64, count=n)
    return src, dst, cost


def _finish(g: TransitionGraph, dist_arr) -> DistanceMap:
    dist = {s: float(d) for s, d in zip(g.nodes, dist_arr.tolist())}
    finite = [d for d in dist.values() if d != UNREACHABLE]
    return DistanceMap(dist=dist, d_max=max(finite) if finite else 0.0)


def compute_distances(g: TransitionGraph) -> DistanceMap:
    """Minimum total cost from every node to any goal node.

    One multi-source Dijkstra over the reversed graph, seeded at all goals.
    Nodes with no path to a goal are ``inf``.
    """
    src, dst, cost = graph_arrays(g)
    if len(cost) and not (cost > 0).all():
        raise ValueError("all edge costs must be positive")
    is_goal = np.fromiter((s in g.goal_nodes for s in g.nodes), dtype=np.uint8, count=len(g.nodes))
    dist_arr = kernels.reverse_dijkstra(len(g.nodes), src, dst, cost, is_goal, _node_ranks(g.nodes))
    return _finish(g, dist_arr)


def effective_distance(dm: DistanceMap, s: StateKey) -> float:
    d = dm.dist[s]
    return dm.d_max + 1.0 if d == UNREACHABLE else d


def _fmt(x: float) -> str:
    return "inf" if x == UNREACHABLE else f"{x:g}"


def export_dot(g: TransitionGraph, dm: DistanceMap, width: int = 24) -> str:
    """Render the graph as deterministic DOT text (nodes and edges sorted by key bytes)."""
    order = sorted(g.nodes, key=lambda s: s.bytes)
    name = {s: f"n{i}" for i, s in enumerate(order)}
    lines = ["digraph G {"]
    for s in order:
        label = f"{s.short(width)}\\nd={_fmt(dm.dist[s])}".replace('"', '\\"')
        attrs = [f'label="{label}"']
        if s in g.goal_nodes:
            attrs.append("shape=doublecircle")
        elif s in g.fail_terminals:
            attrs.append("shape=box")
        lines.append(f"  {name[s]} [{', '.join(attrs)}];")
    for e in sorted(g.edges, key=lambda e: (e.src.bytes, e.action, e.dst.bytes, e.cost)):
        lines.append(f'  {name[e.src]} -> {name[e.dst]} [label="{e.action}:{e.cost:g}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def dump_graph(g: TransitionGraph, dm: DistanceMap, sink: IO[str]) -> int:
    """Line-delimited node and edge records, nodes carrying their distance."""
    count = 0
    for s in sorted(g.nodes, key=lambda s: s.bytes):
        kind = "goal" if s in g.goal_nodes else "fail" if s in g.fail_terminals else "inner"
        rec = {"kind": "node", "state_key_bytes": s.b64(), "role": kind, "dist": _fmt(dm.dist[s])}
        sink.write(json.dumps(rec, separators=(",", ":")) + "\n")
        count += 1
    for e in sorted(g.edges, key=lambda e: (e.src.bytes, e.action, e.dst.bytes, e.cost)):
        rec = {
            "kind": "edge",
            "state_key_bytes": e.src.b64(),
            "action": e.action,
            "next_state_key_bytes": e.dst.b64(),
            "cost": e.cost,
            "occurrences": len(e.occurrences),
        }
        sink.write(json.dumps(rec, separators=(",", ":")) + "\n")
        count += 1
    return count


@dataclass
class CompactGraph:
    """Integer-indexed graph of one rollout group, for the training hot path.

    Steps are flattened in ``(m, t)`` order. ``edge_of_step`` maps each step
    to its deduplicated edge; edges are numbered by first occurrence.
    ``penalties[m]``, ``terminal[m]`` and ``success[m]`` are trajectory
    ``m``'s summed step penalties, final node id and success flag. Holds the same information as
    :class:`TransitionGraph` plus distances.
    """

    nodes: list[StateKey]
    step_src: np.ndarray
    step_act: np.ndarray
    step_dst: np.ndarray
    step_cost: np.ndarray
    step_traj: np.ndarray
    step_t: np.ndarray
    penalties: np.ndarray
    terminal: np.ndarray
    success: np.ndarray
    edge_of_step: np.ndarray
    edge_first: np.ndarray
    is_goal: np.ndarray
    dist: np.ndarray

    @property
    def n_edges(self) -> int:
        return len(self.edge_first)

    @property
    def edge_src(self) -> np.ndarray:
        return self.step_src[self.edge_first]

    @property
    def edge_dst(self) -> np.ndarray:
        return self.step_dst[self.edge_first]

    @property
    def edge_cost(self) -> np.ndarray:
        return self.step_cost[self.edge_first]

    def edge_counts(self) -> np.ndarray:
        return np.bincount(self.edge_of_step, minlength=self.n_edges)

    @property
    def d_max(self) -> float:
        finite = self.dist[np.isfinite(self.dist)]
        return float(finite.max()) if finite.size else 0.0


def compact_graph(tset: TrajectorySet) -> CompactGraph:
    """Intern states, deduplicate edges and compute distances in one kernel call."""
    success = np.fromiter((t.outcome is Outcome.SUCCESS for t in tset.trajectories), dtype=np.uint8, count=len(tset))
    (nodes, src, act, dst, cost, traj_of, t_of, pens, term,
     edge_of, first, is_goal, n_clash, dist) = kernels.build_compact(tset.trajectories, success)
    if n_clash:
        raise AggregationError(f"{n_clash} node(s) marked both goal and failure terminal")
    return CompactGraph(nodes, src, act, dst, cost, traj_of, t_of, pens, term, success, edge_of, first, is_goal, dist)
