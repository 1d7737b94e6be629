"""Compare the compiled and pure-Python kernel backends on realistic inputs.

Inputs are rollout groups (M=8) from each environment under a uniform
policy, the same shape the training loop sees. Usage:

    python benchmarks/bench_kernels.py [--groups 50] [--repeat 5]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from graphgpo.envs import make_env
from graphgpo.graph import _node_ranks, aggregate, graph_arrays
from graphgpo.harness import rollout_group
from graphgpo.kernels import backends
from graphgpo.rollout import Outcome


def _inputs(env_name: str, n_groups: int):
    env = make_env(env_name)
    rng = np.random.default_rng(0)
    out = []
    for i in range(n_groups):
        ts = rollout_group(env, env.policy(), 8, None, rng, task_seed=i)
        succ = np.array([t.outcome is Outcome.SUCCESS for t in ts], dtype=np.uint8)
        g = aggregate(ts)
        src, dst, cost = graph_arrays(g)
        is_goal = np.array([s in g.goal_nodes for s in g.nodes], dtype=np.uint8)
        out.append((ts, succ, (len(g.nodes), src, dst, cost, is_goal, _node_ranks(g.nodes))))
    return out


def _cases(impl, data):
    compact = [impl.build_compact(ts.trajectories, succ) for ts, succ, _ in data]

    def dijkstra():
        for _, _, args in data:
            impl.reverse_dijkstra(*args)

    def build():
        for ts, succ, _ in data:
            impl.build_compact(ts.trajectories, succ)

    def credit():
        for (ts, succ, _), c in zip(data, compact):
            (_, src, _, dst, cost, traj, _, pen, _, edge_of, first, goal, _, dist) = c
            impl.compact_credit(
                len(goal), src, dst, cost, traj, edge_of, first, dist, None, succ, pen,
                ts.r_succ, 0.1, 10.0, 1e-8, 1.0, 1.0, None,
            )

    return {"reverse_dijkstra": dijkstra, "build_compact": build, "compact_credit": credit}


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--groups", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    found = backends()
    if "cython" not in found:
        print("compiled extension not built; only the python backend is available")
    names = sorted(found)
    header = f"{'env':<12} {'kernel':<18}" + "".join(f" {n + ' us/group':>18}" for n in names)
    if len(names) > 1:
        header += f" {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for env_name in ("chaintrap", "keydoor", "minisokoban"):
        data = _inputs(env_name, args.groups)
        per_backend = {n: _cases(found[n], data) for n in names}
        for kernel in per_backend[names[0]]:
            times = {}
            for n in names:
                fn = per_backend[n][kernel]
                best = min(timeit.repeat(fn, number=1, repeat=args.repeat))
                times[n] = best / len(data) * 1e6
            row = f"{env_name:<12} {kernel:<18}" + "".join(f" {times[n]:>18.1f}" for n in names)
            if len(names) > 1:
                row += f" {times['python'] / times['cython']:>7.1f}x"
            print(row)


if __name__ == "__main__":
    main()
