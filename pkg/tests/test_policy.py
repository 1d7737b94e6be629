import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphgpo.policy import (
    NonFiniteUpdateError,
    OptimConfig,
    PolicyContractError,
    TabularPolicy,
    action_probabilities,
    apply_update,
    kl_exact,
    load_checkpoint,
    log_probability,
    save_checkpoint,
    surrogate_loss,
)

from conftest import k

S, T = k("s"), k("t")


def _pol(rows, n=3, admissible=None):
    return TabularPolicy(n, admissible, {key: np.asarray(v, dtype=float) for key, v in rows.items()})


def test_softmax_examples():
    assert action_probabilities(TabularPolicy(4), S).tolist() == [0.25] * 4
    assert action_probabilities(_pol({S: [1, 1]}, 2), S).tolist() == [0.5, 0.5]
    z = np.array([2.0, 0.0, 0.0])
    direct = np.exp(z) / np.exp(z).sum()
    assert np.max(np.abs(action_probabilities(_pol({S: z}), S) - direct)) < 1e-12


def test_masking_zeroes_inadmissible_actions():
    pol = _pol({S: [5.0, 0.0, 0.0]}, admissible=lambda s: [1, 2])
    p = action_probabilities(pol, S)
    assert p[0] == 0.0 and p[1] == p[2] == 0.5
    assert pol.arity(S) == 2
    with pytest.raises(PolicyContractError):
        action_probabilities(TabularPolicy(2, lambda s: []), S)


def test_kl_examples():
    p = _pol({S: np.log([0.5, 0.5])}, 2)
    q = _pol({S: np.log([0.9, 0.1])}, 2)
    expect = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert kl_exact(p, q, [S]) == pytest.approx(expect, abs=1e-12)
    assert round(expect, 4) == 0.5108
    assert kl_exact(p, p, [S]) == 0.0


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_kl_nonnegative(a, b):
    assert kl_exact(_pol({S: a}), _pol({S: b}), [S]) >= 0.0


def test_identity_ratio_loss_is_minus_mean_advantage():
    pol = _pol({S: [0.3, -0.2, 0.1]})
    batch = [(S, 0, 1.5), (S, 2, -0.5), (T, 1, 0.25)]
    loss, _ = surrogate_loss(pol, pol, pol, batch, OptimConfig(kl_coef=0.0))
    assert loss == pytest.approx(-np.mean([1.5, -0.5, 0.25]), abs=1e-12)


def test_clip_branch_example():
    # rho = 1.5 for a single step with A = 1 and eps = 0.2 -> -min(1.5, 1.2)
    old = _pol({S: np.log([0.4, 0.6])}, 2)
    new = _pol({S: np.log([0.6, 0.4])}, 2)
    loss, grad = surrogate_loss(new, old, new, [(S, 0, 1.0)], OptimConfig(clip_eps=0.2, kl_coef=0.0))
    assert loss == pytest.approx(-1.2, abs=1e-12)
    assert not grad[S].any()


def test_clipping_inert_inside_trust_region():
    old = _pol({S: [0.0, 0.05, -0.05]})
    new = _pol({S: [0.02, 0.0, 0.0]})
    batch = [(S, 0, 1.0), (S, 1, -2.0)]
    cfg = OptimConfig(clip_eps=0.2, kl_coef=0.0)
    loss, _ = surrogate_loss(new, old, new, batch, cfg)
    rho = [math.exp(log_probability(new, S, a) - log_probability(old, S, a)) for _, a, _ in batch]
    assert all(abs(r - 1) <= 0.2 for r in rho)
    wide, _ = surrogate_loss(new, old, new, batch, OptimConfig(clip_eps=1.0, kl_coef=0.0))
    assert loss == wide
    assert loss == pytest.approx(-np.mean([r * x for r, (_, _, x) in zip(rho, batch)]), abs=1e-15)


def _loss_at(theta, states, n, old, ref, batch, cfg):
    pol = TabularPolicy(n, None, {s: theta[i] for i, s in enumerate(states)})
    return surrogate_loss(pol, old, ref, batch, cfg)


@pytest.mark.parametrize("seed", range(100))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    states = [k(f"x{i}") for i in range(int(rng.integers(1, 4)))]
    theta = rng.normal(size=(len(states), n))
    old = TabularPolicy(n, None, {s: theta[i] + rng.normal(scale=0.1, size=n) for i, s in enumerate(states)})
    ref = TabularPolicy(n, None, {s: rng.normal(size=n) for s in states})
    batch = [(states[int(rng.integers(len(states)))], int(rng.integers(n)), float(rng.normal())) for _ in range(6)]
    cfg = OptimConfig(clip_eps=0.2, kl_coef=float(rng.uniform(0, 0.1)))
    _, grad = _loss_at(theta, states, n, old, ref, batch, cfg)
    h = 1e-5
    for i, s in enumerate(states):
        for a in range(n):
            up, dn = theta.copy(), theta.copy()
            up[i, a] += h
            dn[i, a] -= h
            fd = (_loss_at(up, states, n, old, ref, batch, cfg)[0] - _loss_at(dn, states, n, old, ref, batch, cfg)[0]) / (2 * h)
            g = grad[s][a] if s in grad else 0.0
            assert abs(g - fd) <= 1e-6 * max(1.0, abs(fd))


def test_update_direction():
    pol = TabularPolicy(3)
    cfg = OptimConfig(kl_coef=0.0, learning_rate=0.5)
    _, grad = surrogate_loss(pol, pol.copy(), pol.copy(), [(S, 1, 1.0), (T, 2, -1.0)], cfg)
    before_s, before_t = log_probability(pol, S, 1), log_probability(pol, T, 2)
    apply_update(pol, grad, cfg)
    assert log_probability(pol, S, 1) > before_s
    assert log_probability(pol, T, 2) < before_t


def test_zero_gradient_and_nonfinite():
    pol = _pol({S: [1.0, 2.0, 3.0]})
    snap = pol.copy()
    apply_update(pol, {S: np.zeros(3)}, OptimConfig())
    assert pol == snap
    with pytest.raises(NonFiniteUpdateError):
        apply_update(pol, {S: np.array([np.nan, 0, 0])}, OptimConfig())
    assert pol == snap
    with pytest.raises(PolicyContractError):
        surrogate_loss(pol, pol, pol, [(S, 0, float("inf"))], OptimConfig())


@pytest.mark.parametrize("bad", [dict(clip_eps=0), dict(clip_eps=1.5), dict(kl_coef=-1), dict(learning_rate=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        OptimConfig(**bad)


def test_checkpoint_roundtrip_sorted():
    pol = _pol({T: [0.5, -1.0, 2.0], S: [1.0, 0.0, -3.25]})
    buf = io.StringIO()
    assert save_checkpoint(pol, buf) == 6
    text = buf.getvalue()
    back = load_checkpoint(io.StringIO(text), 3)
    assert back == pol
    again = io.StringIO()
    save_checkpoint(back, again)
    assert again.getvalue() == text
    with pytest.raises(ValueError, match="line 1"):
        load_checkpoint(["{bad"], 3)
