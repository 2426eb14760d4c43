"""Environments, trajectory collection and exhaustive trajectory enumeration.

Two environment families are provided: :class:`TabularMdpSpec` (finite,
enumerable) and :class:`CartPoleSpec` (classic control, Euler integration).
Both expose the same vectorised interface::

    states = env.reset(rng, n)
    next_states, rewards, terminated = env.step(states, actions, rng)

so that a whole batch of episodes can be simulated in lock-step.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_ENUM_CAP = 10**6
_PROB_TOL = 1e-12


class EnvError(ValueError):
    pass


class EnumerationTooLargeError(RuntimeError):
    pass


def enumeration_cap() -> int:
    """Enumeration cap, overridable through ``MBPG_ENUM_CAP``."""
    raw = os.environ.get("MBPG_ENUM_CAP")
    if raw is None:
        return DEFAULT_ENUM_CAP
    try:
        return int(float(raw))
    except ValueError as exc:
        raise EnvError(f"MBPG_ENUM_CAP must be an integer, got {raw!r}") from exc


@dataclass
class Trajectory:
    """One episode.

    ``states[h]``, ``actions[h]`` and ``rewards[h]`` describe step ``h``;
    ``final_state`` is the state reached after the last action.
    ``step_log_probs`` holds the behaviour policy's log pi(a_h|s_h) when the
    trajectory was sampled (None for enumerated trajectories).
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    final_state: object = None
    step_log_probs: np.ndarray | None = None

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if len(self.rewards) < 1:
            raise EnvError("trajectory must contain at least one step")
        if not (len(self.states) == len(self.actions) == len(self.rewards)):
            raise EnvError("states, actions and rewards must have equal length")

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def behavior_log_prob(self) -> float | None:
        if self.step_log_probs is None:
            return None
        return float(np.sum(self.step_log_probs))

    @property
    def undiscounted_return(self) -> float:
        return float(np.sum(self.rewards))


def discounted_return(traj: Trajectory, gamma: float) -> float:
    """Sum of gamma**h * r_h over the trajectory."""
    if not 0.0 <= gamma <= 1.0:
        raise EnvError(f"gamma must lie in [0, 1], got {gamma}")
    disc = gamma ** np.arange(traj.length, dtype=np.float64)
    return float(np.dot(disc, traj.rewards))


@dataclass
class TabularMdpSpec:
    """Finite-horizon tabular MDP with fixed-length episodes (no terminal states)."""

    transition: np.ndarray  # P[s, a, s']
    reward: np.ndarray  # R[s, a]
    initial_dist: np.ndarray
    horizon: int
    discount: float
    r_max: float | None = None
    num_states: int = field(init=False)
    num_actions: int = field(init=False)

    def __post_init__(self):
        self.transition = np.array(self.transition, dtype=np.float64)
        self.reward = np.array(self.reward, dtype=np.float64)
        self.initial_dist = np.array(self.initial_dist, dtype=np.float64)
        if self.transition.ndim != 3 or self.transition.shape[0] != self.transition.shape[2]:
            raise EnvError("transition must have shape (S, A, S)")
        self.num_states, self.num_actions = self.transition.shape[:2]
        if self.num_states < 1 or self.num_actions < 1:
            raise EnvError("need at least one state and one action")
        if self.reward.shape != (self.num_states, self.num_actions):
            raise EnvError(f"reward must have shape {(self.num_states, self.num_actions)}")
        if self.initial_dist.shape != (self.num_states,):
            raise EnvError(f"initial_dist must have shape ({self.num_states},)")
        if np.any(self.transition < 0) or np.any(
            np.abs(self.transition.sum(axis=2) - 1.0) > _PROB_TOL
        ):
            raise EnvError("every P[s, a, :] must be a probability vector")
        if np.any(self.initial_dist < 0) or abs(self.initial_dist.sum() - 1.0) > _PROB_TOL:
            raise EnvError("initial_dist must be a probability vector")
        if not np.all(np.isfinite(self.reward)):
            raise EnvError("rewards must be finite")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise EnvError("horizon must be a positive integer")
        self.horizon = int(self.horizon)
        if not 0.0 < self.discount < 1.0:
            raise EnvError(f"discount must lie in (0, 1), got {self.discount}")
        bound = float(np.max(np.abs(self.reward)))
        if self.r_max is None:
            self.r_max = bound if bound > 0 else 1.0
        if self.r_max <= 0 or bound > self.r_max:
            raise EnvError(f"rewards exceed declared r_max={self.r_max}")

    # -- vectorised environment interface --
    def reset(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return _sample_rows(np.broadcast_to(self.initial_dist, (n, self.num_states)), rng)

    def step(self, states, actions, rng: np.random.Generator):
        states = np.asarray(states, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        rewards = self.reward[states, actions]
        nxt = _sample_rows(self.transition[states, actions], rng)
        return nxt, rewards, np.zeros(len(states), dtype=bool)

    # -- serialisation --
    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "horizon": self.horizon,
            "gamma": self.discount,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularMdpSpec":
        required = {"num_states", "num_actions", "transition", "reward", "initial_dist", "horizon", "gamma"}
        missing = required - set(data)
        if missing:
            raise EnvError(f"tabular MDP file is missing fields: {sorted(missing)}")
        extra = set(data) - required - {"r_max"}
        if extra:
            raise EnvError(f"unknown fields in tabular MDP file: {sorted(extra)}")
        mdp = cls(
            transition=data["transition"],
            reward=data["reward"],
            initial_dist=data["initial_dist"],
            horizon=data["horizon"],
            discount=data["gamma"],
            r_max=data.get("r_max"),
        )
        if (mdp.num_states, mdp.num_actions) != (data["num_states"], data["num_actions"]):
            raise EnvError("num_states/num_actions disagree with the array shapes")
        return mdp


def load_tabular_mdp(path) -> TabularMdpSpec:
    with open(path) as fh:
        return TabularMdpSpec.from_dict(json.load(fh))


def save_tabular_mdp(mdp: TabularMdpSpec, path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict(), indent=2))


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # inverse-CDF sampling, one uniform per row
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))[:, None] * cdf[:, -1:]
    idx = (cdf <= u).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


@dataclass
class CartPoleSpec:
    """Classic cart-pole balancing task with two push actions.

    State is the raw vector (x, x_dot, angle, angle_dot). Every step that is
    taken earns +1, including the step on which the pole falls.
    """

    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_half_length: float = 0.5
    force: float = 10.0
    time_step: float = 0.02
    position_threshold: float = 2.4
    angle_threshold: float = 12 * 2 * math.pi / 360
    horizon: int = 100
    discount: float = 0.99
    init_noise: float = 0.05

    num_actions = 2
    obs_dim = 4
    r_max = 1.0

    def __post_init__(self):
        for name in ("gravity", "cart_mass", "pole_mass", "pole_half_length", "force",
                     "time_step", "position_threshold", "angle_threshold"):
            if not getattr(self, name) > 0:
                raise EnvError(f"{name} must be positive")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise EnvError("horizon must be a positive integer")
        if not 0.0 < self.discount <= 1.0:
            raise EnvError(f"discount must lie in (0, 1], got {self.discount}")

    def reset(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(-self.init_noise, self.init_noise, size=(n, 4))

    def step(self, states, actions, rng=None):
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions)
        if np.any((actions != 0) & (actions != 1)):
            raise EnvError("cart-pole actions must be 0 or 1")
        x, x_dot, th, th_dot = states.T
        f = np.where(actions == 1, self.force, -self.force)
        total = self.cart_mass + self.pole_mass
        pml = self.pole_mass * self.pole_half_length
        sin, cos = np.sin(th), np.cos(th)
        temp = (f + pml * th_dot**2 * sin) / total
        th_acc = (self.gravity * sin - cos * temp) / (
            self.pole_half_length * (4.0 / 3.0 - self.pole_mass * cos**2 / total)
        )
        x_acc = temp - pml * th_acc * cos / total
        tau = self.time_step
        nxt = np.stack(
            [x + tau * x_dot, x_dot + tau * x_acc, th + tau * th_dot, th_dot + tau * th_acc],
            axis=1,
        )
        failed = (np.abs(nxt[:, 0]) > self.position_threshold) | (
            np.abs(nxt[:, 2]) > self.angle_threshold
        )
        return nxt, np.ones(len(states)), failed


def rollout_batch(env, policy, theta, rng: np.random.Generator, horizon: int, n: int) -> list[Trajectory]:
    """Simulate ``n`` independent episodes of at most ``horizon`` steps in lock-step."""
    policy.check_theta(theta)
    if horizon < 1:
        raise EnvError("horizon must be >= 1")
    states = env.reset(rng, n)
    state_buf = np.empty((horizon,) + states.shape, dtype=states.dtype)
    act_buf = None
    rew_buf = np.zeros((horizon, n))
    logp_buf = np.zeros((horizon, n))
    lengths = np.full(n, horizon)
    final = states.copy()
    active = np.arange(n)
    for h in range(horizon):
        s = states[active]
        a, logp = policy.sample(theta, s, rng)
        if act_buf is None:
            act_buf = np.zeros((horizon, n) + a.shape[1:], dtype=a.dtype)
        nxt, r, done = env.step(s, a, rng)
        state_buf[h, active] = s
        act_buf[h, active] = a
        rew_buf[h, active] = r
        logp_buf[h, active] = logp
        states[active] = nxt
        if h == horizon - 1:
            final[active] = nxt
            break
        if np.any(done):
            ended = active[done]
            lengths[ended] = h + 1
            final[ended] = nxt[done]
            active = active[~done]
            if len(active) == 0:
                break
    return [
        Trajectory(
            states=state_buf[: lengths[i], i].copy(),
            actions=act_buf[: lengths[i], i].copy(),
            rewards=rew_buf[: lengths[i], i].copy(),
            final_state=final[i],
            step_log_probs=logp_buf[: lengths[i], i].copy(),
        )
        for i in range(n)
    ]


def rollout(env, policy, theta, rng: np.random.Generator, horizon: int) -> Trajectory:
    """Sample a single trajectory; ends early only if the environment fails."""
    return rollout_batch(env, policy, theta, rng, horizon, 1)[0]


def trajectory_count_bound(mdp: TabularMdpSpec) -> int:
    """Number of branches (s_0, a_0, s_1, ..., a_{H-1}, s_H) before pruning zeros."""
    return mdp.num_states * (mdp.num_actions * mdp.num_states) ** mdp.horizon


def enumerate_trajectories(mdp: TabularMdpSpec, policy, theta, cap: int | None = None):
    """All length-H trajectories with nonzero probability, with their probabilities.

    The probability of each trajectory is
    rho(s_0) * prod_h P(s_{h+1}|s_h, a_h) * pi(a_h|s_h), including the final
    transition into s_H. Order is lexicographic in (s_0, a_0, s_1, ...).
    """
    cap = enumeration_cap() if cap is None else cap
    bound = trajectory_count_bound(mdp)
    if bound > cap:
        raise EnumerationTooLargeError(
            f"{bound} trajectory branches exceed the enumeration cap {cap}"
        )
    policy.check_theta(theta)
    S, A, H = mdp.num_states, mdp.num_actions, mdp.horizon
    ss = np.repeat(np.arange(S), A)
    aa = np.tile(np.arange(A), S)
    pi = np.exp(policy.log_prob(theta, ss, aa)).reshape(S, A)

    # each row: s_0, a_0, s_1, ..., s_h
    seqs = np.flatnonzero(mdp.initial_dist > 0)[:, None]
    probs = mdp.initial_dist[seqs[:, 0]]
    for _ in range(H):
        last = seqs[:, -1]
        branch = pi[last][:, :, None] * mdp.transition[last]  # (n, A, S)
        n_idx, a_idx, s_idx = np.nonzero(branch > 0)
        probs = probs[n_idx] * branch[n_idx, a_idx, s_idx]
        seqs = np.concatenate([seqs[n_idx], a_idx[:, None], s_idx[:, None]], axis=1)

    out = []
    for row, p in zip(seqs, probs):
        states = row[0:-1:2]
        actions = row[1::2]
        out.append(
            (
                Trajectory(
                    states=states.copy(),
                    actions=actions.copy(),
                    rewards=mdp.reward[states, actions],
                    final_state=int(row[-1]),
                ),
                float(p),
            )
        )
    return out
