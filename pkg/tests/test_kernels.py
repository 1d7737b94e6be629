"""The compiled and pure-Python kernels must agree on every entry point."""

import numpy as np
import pytest

from graphgpo import kernels
from graphgpo.envs import make_env
from graphgpo.graph import _node_ranks, graph_arrays
from graphgpo.harness import rollout_group
from graphgpo.probes import random_graph
from graphgpo.rollout import Outcome

BACKENDS = kernels.backends()
needs_both = pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")


def test_backend_flag():
    assert kernels.BACKEND in BACKENDS


def _groups(env_name, n=10, seed=0):
    env = make_env(env_name)
    rng = np.random.default_rng(seed)
    return [rollout_group(env, env.policy(), 8, None, rng, task_seed=i) for i in range(n)]


def _same(a, b, tol=0.0):
    if isinstance(a, (list, tuple)):
        assert len(a) == len(b)
        for x, y in zip(a, b):
            _same(x, y, tol)
    elif isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        a, b = np.asarray(a), np.asarray(b)
        assert a.shape == b.shape
        if tol:
            np.testing.assert_allclose(a, b, rtol=tol, atol=tol)
        else:
            np.testing.assert_array_equal(a, b)
    else:
        assert a == b or (tol and abs(a - b) <= tol)


@needs_both
@pytest.mark.parametrize("seed", range(50))
def test_dijkstra_agrees(seed):
    g = random_graph(np.random.default_rng(seed))
    src, dst, cost = graph_arrays(g)
    is_goal = np.array([s in g.goal_nodes for s in g.nodes], dtype=np.uint8)
    ranks = _node_ranks(g.nodes)
    py = BACKENDS["python"].reverse_dijkstra(len(g.nodes), src, dst, cost, is_goal, ranks)
    cy = BACKENDS["cython"].reverse_dijkstra(len(g.nodes), src, dst, cost, is_goal, ranks)
    _same(py, cy)


@needs_both
@pytest.mark.parametrize("env_name", ["chaintrap", "keydoor", "minisokoban"])
def test_build_compact_agrees(env_name):
    for ts in _groups(env_name):
        succ = np.array([t.outcome is Outcome.SUCCESS for t in ts], dtype=np.uint8)
        py = BACKENDS["python"].build_compact(ts.trajectories, succ)
        cy = BACKENDS["cython"].build_compact(ts.trajectories, succ)
        assert list(py[0]) == list(cy[0])
        _same(list(py[1:]), list(cy[1:]))


@needs_both
@pytest.mark.parametrize("env_name", ["chaintrap", "keydoor"])
@pytest.mark.parametrize("gigpo", [False, True])
@pytest.mark.parametrize("weighted", [False, True])
def test_compact_credit_agrees(env_name, gigpo, weighted):
    for ts in _groups(env_name, seed=1):
        succ = np.array([t.outcome is Outcome.SUCCESS for t in ts], dtype=np.uint8)
        (_, src, act, dst, cost, traj, t, pen, term, edge_of, first, goal, _, dist) = BACKENDS["python"].build_compact(
            ts.trajectories, succ
        )
        weights = np.bincount(edge_of, minlength=len(first)).astype(float) if weighted else None
        values = np.linspace(0, 10, len(src)) if gigpo else None
        args = (len(goal), src, dst, cost, traj, edge_of, first, dist, weights, succ, pen, 10.0, 0.3, 10.0, 1e-8, 1.0, 1.0, values)
        _same(list(BACKENDS["python"].compact_credit(*args)), list(BACKENDS["cython"].compact_credit(*args)), 1e-12)


@needs_both
@pytest.mark.parametrize("seed", range(30))
def test_normalizers_agree(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    values = rng.normal(size=n)
    values[: n // 3] = 1.5  # force some constant groups
    cuts = np.sort(rng.choice(np.arange(1, n), size=min(3, n - 1), replace=False)) if n > 1 else []
    offsets = np.concatenate([[0], cuts, [n]]).astype(np.int64)
    weights = rng.uniform(0.5, 2.0, size=n)
    a = BACKENDS["python"].group_normalize(values, offsets, weights, 1e-8)
    b = BACKENDS["cython"].group_normalize(values, offsets, weights, 1e-8)
    _same(a, b, 1e-12)
    keys = rng.integers(0, 5, size=n).astype(np.int64)
    _same(
        BACKENDS["python"].keyed_normalize(keys, 5, values, 1e-8),
        BACKENDS["cython"].keyed_normalize(keys, 5, values, 1e-8),
        1e-12,
    )


@needs_both
@pytest.mark.parametrize("seed", range(30))
def test_surrogate_agrees(seed):
    rng = np.random.default_rng(seed)
    n_states, n_actions, n = 4, 3, 20
    logits = rng.normal(size=(n_states, n_actions))
    ref = rng.normal(size=(n_states, n_actions))
    rows = rng.integers(0, n_states, size=n).astype(np.int64)
    actions = rng.integers(0, n_actions, size=n).astype(np.int64)
    adv = rng.normal(size=n)
    old = np.log(np.full(n, 1 / 3)) + rng.normal(scale=0.3, size=n)
    args = (logits, ref, rows, actions, adv, old, 0.2, 0.01)
    a = BACKENDS["python"].surrogate_loss_grad(*args)
    b = BACKENDS["cython"].surrogate_loss_grad(*args)
    assert a[0] == pytest.approx(b[0], abs=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)


def test_empty_inputs():
    for impl in BACKENDS.values():
        assert len(impl.reverse_dijkstra(0, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.uint8), np.zeros(0, np.int64))) == 0
        assert len(impl.group_normalize(np.zeros(0), np.array([0], np.int64), np.zeros(0), 1e-8)) == 0
