import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import oracle_mdp
from mbpg.env import (
    CartPoleSpec,
    EnumerationTooLargeError,
    EnvError,
    TabularMdpSpec,
    Trajectory,
    discounted_return,
    enumerate_trajectories,
    load_tabular_mdp,
    rollout,
    rollout_batch,
    save_tabular_mdp,
)
from mbpg.policy import MlpSoftmax, ParameterShapeError, TabularSoftmax


class AlwaysPush:
    """Deterministic stand-in policy: always the same action."""

    dim = 1

    def __init__(self, action):
        self.action = action

    def check_theta(self, theta):
        pass

    def sample(self, theta, states, rng):
        n = len(states)
        return np.full(n, self.action), np.zeros(n)


def chain_mdp(rewards, gamma=0.5):
    """Single-action deterministic chain 0 -> 1 -> ... visiting one state per step."""
    H = len(rewards)
    S = H + 1
    P = np.zeros((S, 1, S))
    for s in range(S):
        P[s, 0, min(s + 1, S - 1)] = 1.0
    R = np.zeros((S, 1))
    R[:H, 0] = rewards
    rho = np.zeros(S)
    rho[0] = 1.0
    return TabularMdpSpec(P, R, rho, H, gamma)


def test_discounted_return_examples():
    t = Trajectory(np.zeros(100, int), np.zeros(100, int), np.ones(100))
    assert discounted_return(t, 0.99) == pytest.approx((1 - 0.99**100) / (1 - 0.99), abs=1e-12)
    assert discounted_return(t, 0.99) == pytest.approx(63.39677, abs=1e-4)
    z = Trajectory(np.zeros(5, int), np.zeros(5, int), np.zeros(5))
    assert discounted_return(z, 0.9) == 0.0
    t3 = Trajectory(np.zeros(3, int), np.zeros(3, int), [5.0, 7.0, 9.0])
    assert discounted_return(t3, 0.0) == 5.0


@given(
    st.lists(st.floats(-10, 10), min_size=1, max_size=20),
    st.floats(-3, 3),
    st.floats(-3, 3),
    st.floats(0.0, 0.999),
)
def test_discounted_return_is_affine_in_rewards(rewards, a, b, gamma):
    n = len(rewards)
    t = Trajectory(np.zeros(n, int), np.zeros(n, int), rewards)
    t2 = Trajectory(np.zeros(n, int), np.zeros(n, int), a * np.asarray(rewards) + b)
    expected = a * discounted_return(t, gamma) + b * (1 - gamma**n) / (1 - gamma)
    assert discounted_return(t2, gamma) == pytest.approx(expected, rel=1e-9, abs=1e-9)


def test_tabular_validation():
    with pytest.raises(EnvError):
        TabularMdpSpec([[[0.5, 0.4]]] * 2, np.zeros((2, 1)), [1.0, 0.0], 3, 0.9)
    with pytest.raises(EnvError):
        TabularMdpSpec([[[1.0, 0.0]], [[0.0, 1.0]]], np.zeros((2, 1)), [0.7, 0.7], 3, 0.9)
    with pytest.raises(EnvError):
        oracle_mdp(gamma=1.0)
    with pytest.raises(EnvError):
        TabularMdpSpec([[[1.0]]], [[2.0]], [1.0], 3, 0.9, r_max=1.0)


def test_tabular_spec_owns_its_arrays():
    reward = np.zeros((2, 2))
    mdp = oracle_mdp(reward=reward)
    mdp.reward[0, 0] = np.nan
    assert reward[0, 0] == 0.0


def test_tabular_json_roundtrip(tmp_path, mdp):
    path = tmp_path / "mdp.json"
    save_tabular_mdp(mdp, path)
    data = json.loads(path.read_text())
    assert set(data) == {"num_states", "num_actions", "transition", "reward", "initial_dist", "horizon", "gamma"}
    back = load_tabular_mdp(path)
    np.testing.assert_array_equal(back.transition, mdp.transition)
    assert back.horizon == 3 and back.discount == 0.9
    data["initial_dist"] = [0.5, 0.6]
    path.write_text(json.dumps(data))
    with pytest.raises(EnvError):
        load_tabular_mdp(path)


def test_deterministic_rollout_is_unique_trajectory():
    mdp = chain_mdp([1.0, 0.0, 2.0])
    pol = TabularSoftmax(mdp.num_states, 1)
    theta = pol.init_params()
    tr = rollout(mdp, pol, theta, np.random.default_rng(0), 3)
    assert tr.length == 3
    np.testing.assert_array_equal(tr.states, [0, 1, 2])
    assert tr.final_state == 3
    (only, p), = enumerate_trajectories(mdp, pol, theta)
    assert p == 1.0
    np.testing.assert_array_equal(only.states, tr.states)


def test_rollout_same_seed_identical(mdp, tab_policy):
    theta = np.array([0.3, -0.2, 1.0, 0.1])
    a = rollout(mdp, tab_policy, theta, np.random.default_rng(5), 3)
    b = rollout(mdp, tab_policy, theta, np.random.default_rng(5), 3)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.actions, b.actions)
    np.testing.assert_array_equal(a.step_log_probs, b.step_log_probs)


def test_rollout_rejects_wrong_dimension(mdp, tab_policy):
    with pytest.raises(ParameterShapeError):
        rollout(mdp, tab_policy, np.zeros(5), np.random.default_rng(0), 3)


def _reference_cartpole_step(s, action, spec):
    # scalar re-derivation of the classic equations of motion
    x, x_dot, th, th_dot = s
    f = spec.force if action == 1 else -spec.force
    mt = spec.cart_mass + spec.pole_mass
    l = spec.pole_half_length
    temp = (f + spec.pole_mass * l * th_dot**2 * math.sin(th)) / mt
    th_acc = (spec.gravity * math.sin(th) - math.cos(th) * temp) / (
        l * (4 / 3 - spec.pole_mass * math.cos(th) ** 2 / mt)
    )
    x_acc = temp - spec.pole_mass * l * th_acc * math.cos(th) / mt
    dt = spec.time_step
    return [x + dt * x_dot, x_dot + dt * x_acc, th + dt * th_dot, th_dot + dt * th_acc]


@pytest.mark.parametrize("action", [0, 1])
def test_cartpole_always_push_falls_early(action):
    spec = CartPoleSpec(horizon=100)
    tr = rollout(spec, AlwaysPush(action), None, np.random.default_rng(3), 100)
    assert 1 <= tr.length < 100
    s = list(tr.states[0])
    for h in range(tr.length):
        np.testing.assert_allclose(tr.states[h], s, rtol=0, atol=1e-12)
        s = _reference_cartpole_step(s, action, spec)
    np.testing.assert_allclose(tr.final_state, s, atol=1e-12)
    assert abs(s[2]) > spec.angle_threshold or abs(s[0]) > spec.position_threshold
    assert tr.undiscounted_return == tr.length


def test_cartpole_batch_lengths_and_seed(tmp_path):
    spec = CartPoleSpec()
    pol = MlpSoftmax(4, 2, (8, 8))
    theta = pol.init_params(np.random.default_rng(0))
    a = rollout_batch(spec, pol, theta, np.random.default_rng(9), 100, 20)
    b = rollout_batch(spec, pol, theta, np.random.default_rng(9), 100, 20)
    for x, y in zip(a, b):
        assert 1 <= x.length <= 100
        np.testing.assert_array_equal(x.states, y.states)
        np.testing.assert_array_equal(x.actions, y.actions)
        # step log-probs are recorded under the sampling policy
        np.testing.assert_allclose(x.step_log_probs, pol.log_prob(theta, x.states, x.actions), atol=1e-12)


def test_enumeration_uniform_example():
    P = np.full((2, 2, 2), 0.5)
    mdp = TabularMdpSpec(P, np.zeros((2, 2)), [0.5, 0.5], 2, 0.9)
    pol = TabularSoftmax(2, 2)
    trajs = enumerate_trajectories(mdp, pol, pol.init_params())
    assert len(trajs) == 32
    for _, p in trajs:
        assert p == pytest.approx(1 / 32, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_enumeration_normalised(seed, horizon):
    rng = np.random.default_rng(seed)
    S, A = 3, 2
    mdp = TabularMdpSpec(rng.dirichlet(np.ones(S), size=(S, A)), rng.uniform(-1, 1, (S, A)),
                         rng.dirichlet(np.ones(S)), horizon, 0.9)
    pol = TabularSoftmax(S, A)
    theta = rng.standard_normal(pol.dim) * 2
    probs = np.array([p for _, p in enumerate_trajectories(mdp, pol, theta)])
    assert np.all(probs >= 0)
    assert abs(probs.sum() - 1.0) < 1e-12


def test_logit_increase_raises_action_mass(mdp, tab_policy):
    theta = np.array([0.2, -0.4, 0.1, 0.5])

    def mass(th, s, a):
        return sum(p for t, p in enumerate_trajectories(mdp, tab_policy, th)
                   if np.any((t.states == s) & (t.actions == a)))

    for s in range(2):
        for a in range(2):
            bumped = theta.copy()
            bumped[s * 2 + a] += 0.3
            assert mass(bumped, s, a) > mass(theta, s, a)


def test_enumeration_cap(mdp, tab_policy, monkeypatch):
    with pytest.raises(EnumerationTooLargeError):
        enumerate_trajectories(mdp, tab_policy, np.zeros(4), cap=100)
    monkeypatch.setenv("MBPG_ENUM_CAP", "50")
    with pytest.raises(EnumerationTooLargeError):
        enumerate_trajectories(mdp, tab_policy, np.zeros(4))


def test_empirical_rollouts_match_enumeration(tab_policy):
    mdp = oracle_mdp(horizon=2)
    theta = np.array([0.4, -0.3, -0.8, 0.6])
    exact = {(tuple(t.states), tuple(t.actions), t.final_state): p
             for t, p in enumerate_trajectories(mdp, tab_policy, theta)}
    n = 10**5
    trajs = rollout_batch(mdp, tab_policy, theta, np.random.default_rng(123), 2, n)
    counts = Counter((tuple(t.states), tuple(t.actions), int(t.final_state)) for t in trajs)
    assert set(counts) <= set(exact)
    for key, p in exact.items():
        se = math.sqrt(p * (1 - p) / n)
        assert abs(counts.get(key, 0) / n - p) <= 3 * se, key
