import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphgpo.credit import (
    CreditParams,
    _gigpo_rewards,
    build_step_groups,
    combined_advantages,
    compact_advantages,
    episode_advantages,
    gigpo_step_advantages,
    graph_advantages,
    graph_step_reward,
)
from graphgpo.envs import make_env
from graphgpo.graph import aggregate, compact_graph, compute_distances, graph_from_edges
from graphgpo.harness import rollout_group
from graphgpo.probes import monotonicity_probe, random_graph
from graphgpo.rollout import Outcome, Step, Trajectory, TrajectorySet

from conftest import merged_set, k


def _edge(g, src, action, dst):
    return g.edge_for(k(src), action, k(dst))


def test_reward_into_goal():
    g = graph_from_edges([(k("a"), 0, k("g"), 1.0)], goal_nodes=[k("g")])
    dm = compute_distances(g)
    assert graph_step_reward(g.edges[0], dm, CreditParams(omega=0.1, r_succ=10)) == pytest.approx(1.0, rel=1e-15)


def test_reward_values_on_merged(merged):
    g = aggregate(merged)
    dm = compute_distances(g)
    p = CreditParams(omega=0.5, r_succ=10)
    assert graph_step_reward(_edge(g, "b", 2, "s2"), dm, p) == 2.5
    # s3 is unreachable with d_max = 2, so its exponent is 3 + 1
    assert graph_step_reward(_edge(g, "s2", 7, "s3"), dm, p) == 0.625


def test_merged_groups(merged):
    g = aggregate(merged)
    groups = build_step_groups(g)
    assert {e.action for e in groups[k("s1")]} == {1, 6}
    assert len(groups[k("b")]) == 1
    assert sum(len(v) for v in groups.values()) == len(g.edges)


def test_two_point_group_is_plus_minus_one(merged):
    g = aggregate(merged)
    dm = compute_distances(g)
    p = CreditParams(omega=0.5, r_succ=10)
    adv = graph_advantages(g, dm, p)
    # rewards 2.5 (via s2) and 1.25 (via b)
    assert adv[_edge(g, "s1", 6, "s2")] == pytest.approx(1.0, abs=1e-12)
    assert adv[_edge(g, "s1", 1, "b")] == pytest.approx(-1.0, abs=1e-12)
    assert adv[_edge(g, "b", 2, "s2")] == 0.0
    assert adv[_edge(g, "s4", 4, "s2")] == 0.0
    # the dead-end move is the worst choice at s2, the goal move the best
    s2 = {e.action: adv[e] for e in g.out_edges[k("s2")]}
    assert s2[5] > s2[3] > s2[7]
    assert monotonicity_probe(g, dm, p) == []


def test_identical_rewards_give_zero():
    g = graph_from_edges(
        [(k("a"), i, k("g"), 1.0) for i in range(3)], goal_nodes=[k("g")]
    )
    adv = graph_advantages(g, compute_distances(g), CreditParams())
    assert list(adv.values()) == [0.0, 0.0, 0.0]


def _set_with_outcomes(outcomes):
    trajs = []
    for i, out in enumerate(outcomes):
        end = "g" if out is Outcome.SUCCESS else f"f{i}"
        trajs.append(Trajectory((Step(k("a"), i, k(end)),), out))
    return TrajectorySet("t", tuple(trajs))


def test_episode_advantages_two_point():
    S, F = Outcome.SUCCESS, Outcome.FAIL_TERMINAL
    ts = _set_with_outcomes([S, S, F, F])
    assert list(episode_advantages(ts).values()) == [1.0, 1.0, -1.0, -1.0]
    assert list(episode_advantages(_set_with_outcomes([S, S, S])).values()) == [0.0, 0.0, 0.0]
    assert episode_advantages(_set_with_outcomes([S])) == {0: 0.0}


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=8, max_size=8).filter(lambda xs: 0 < sum(xs) < 8))
def test_episode_advantages_normalized(flags):
    ts = _set_with_outcomes([Outcome.SUCCESS if f else Outcome.FAIL_TERMINAL for f in flags])
    a = np.array(list(episode_advantages(ts).values()))
    assert abs(a.mean()) < 1e-9 and abs(a.std() - 1) < 1e-9


def test_gigpo_discount_value():
    # success trajectory of length 5, 1-based step 3 (index 2): 10 * 0.95**2
    r = _gigpo_rewards([10.0], [5], np.array([0]), np.array([2]), 0.95)
    assert r[0] == pytest.approx(9.025, rel=1e-12)


def test_gigpo_shared_state_two_point():
    ts = TrajectorySet(
        "t",
        (
            Trajectory((Step(k("a"), 0, k("g")),), Outcome.SUCCESS),
            Trajectory((Step(k("a"), 1, k("f")),), Outcome.FAIL_TERMINAL),
        ),
    )
    adv = gigpo_step_advantages(ts, aggregate(ts), CreditParams())
    assert adv == {(0, 0): 1.0, (1, 0): -1.0}


def test_gigpo_all_failed_group_is_zero():
    ts = _set_with_outcomes([Outcome.FAIL_TERMINAL] * 3)
    adv = gigpo_step_advantages(ts, aggregate(ts), CreditParams())
    assert set(adv.values()) == {0.0}


def test_combined_cancellation_and_reductions(merged):
    g = aggregate(merged)
    dm = compute_distances(g)
    full = combined_advantages(merged, g, dm, CreditParams(omega=0.5))
    # tau2 failed (A^E = -1) but its first move is the better one (A^G = +1)
    assert full.step_adv[(1, 0)] == pytest.approx(0.0, abs=1e-12)
    grpo = combined_advantages(merged, g, dm, CreditParams(omega=0.5, beta_g=0.0))
    for (m, t), a in grpo.step_adv.items():
        assert a == grpo.episode_adv[m]
    no_e = combined_advantages(merged, g, dm, CreditParams(omega=0.5, beta_e=0.0))
    for e in g.edges:
        for occ in e.occurrences:
            assert no_e.step_adv[occ] == full.edge_adv[e]
    assert set(full.step_adv) == {(m, t) for m, tr in enumerate(merged) for t in range(len(tr))}


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99))
def test_graph_advantage_normalization(seed, omega):
    g = random_graph(np.random.default_rng(seed))
    dm = compute_distances(g)
    p = CreditParams(omega=omega)
    adv = graph_advantages(g, dm, p)
    for edges in build_step_groups(g).values():
        vals = np.array([adv[e] for e in edges])
        rewards = np.array([graph_step_reward(e, dm, p) for e in edges])
        if len(edges) == 1 or np.ptp(rewards) == 0:
            assert not vals.any()
            continue
        assert abs(vals.mean()) < 1e-9
        assert abs(vals.std() - 1.0) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_order_within_group_ignores_omega(seed, w1, w2):
    g = random_graph(np.random.default_rng(seed))
    dm = compute_distances(g)
    a1 = graph_advantages(g, dm, CreditParams(omega=w1))
    a2 = graph_advantages(g, dm, CreditParams(omega=w2))
    for edges in build_step_groups(g).values():
        for x in edges:
            for y in edges:
                assert (a1[x] > a1[y]) == (a2[x] > a2[y])


@pytest.mark.parametrize("env_name", ["chaintrap", "keydoor", "minisokoban"])
@pytest.mark.parametrize("signal", ["graph", "gigpo"])
def test_compact_path_is_bit_identical(env_name, signal):
    env = make_env(env_name)
    pol = env.policy()
    for seed in range(30):
        ts = rollout_group(env, pol, 8, None, np.random.default_rng(seed), seed)
        for omega in (0.1, 0.8):
            p = CreditParams(omega=omega, occurrence_weighted=seed % 2 == 1)
            g = aggregate(ts)
            tab = combined_advantages(ts, g, compute_distances(g), p, signal)
            cc = compact_advantages(ts, compact_graph(ts), p, signal)
            ref = [tab.step_adv[(m, t)] for m, tr in enumerate(ts) for t in range(len(tr))]
            assert cc.step_adv.tolist() == ref
            assert cc.episode_adv == list(tab.episode_adv.values())


def test_underflowing_rewards_still_rank():
    # a long chain puts every exponent far below double precision at omega=0.01
    n = 400
    edges = [(k(f"n{i}"), 0, k(f"n{i + 1}"), 1.0) for i in range(n)]
    edges += [(k("n0"), 1, k("n2"), 1.0)]
    g = graph_from_edges(edges, goal_nodes=[k(f"n{n}")])
    dm = compute_distances(g)
    p = CreditParams(omega=0.01)
    assert graph_step_reward(g.edge_for(k("n0"), 0, k("n1")), dm, p) == 0.0
    adv = graph_advantages(g, dm, p)
    assert adv[g.edge_for(k("n0"), 1, k("n2"))] == pytest.approx(1.0)
    assert adv[g.edge_for(k("n0"), 0, k("n1"))] == pytest.approx(-1.0)
    assert all(math.isfinite(v) for v in adv.values())


@pytest.mark.parametrize("bad", [dict(omega=0.0), dict(omega=1.0), dict(r_succ=0), dict(beta_g=-1), dict(gigpo_lambda=0)])
def test_param_validation(bad):
    with pytest.raises(ValueError):
        CreditParams(**bad)
