"""Parameterised stochastic policies with analytic log-probabilities and scores.

Every policy works on a flat parameter vector ``theta`` and on batches of
states: ``log_prob(theta, states, actions)`` returns one value per row and
``score(theta, states, actions)`` returns the per-row gradient of
log pi(a|s) with respect to ``theta`` (shape ``(n, dim)``).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)

KINDS = ("tabular-softmax", "linear-softmax", "mlp-softmax", "linear-gaussian", "mlp-gaussian")


class ParameterShapeError(ValueError):
    pass


class InvalidActionError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyArchitecture:
    """Serializable description of a policy; ``make_policy`` turns it into one.

    ``in_dim`` is the number of states for tabular policies and the state
    feature dimension otherwise; ``out_dim`` is the number of actions
    (categorical) or the action dimension (Gaussian).
    """

    kind: str
    in_dim: int
    out_dim: int
    hidden: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}; expected one of {KINDS}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("in_dim and out_dim must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind.startswith("mlp") and len(self.hidden) < 1:
            raise ValueError("mlp policies need at least one hidden layer")


def make_policy(arch: PolicyArchitecture) -> "Policy":
    if arch.kind == "tabular-softmax":
        return TabularSoftmax(arch.in_dim, arch.out_dim)
    if arch.kind == "linear-softmax":
        return LinearSoftmax(arch.in_dim, arch.out_dim)
    if arch.kind == "mlp-softmax":
        return MlpSoftmax(arch.in_dim, arch.out_dim, arch.hidden)
    if arch.kind == "linear-gaussian":
        return LinearGaussian(arch.in_dim, arch.out_dim)
    return MlpGaussian(arch.in_dim, arch.out_dim, arch.hidden)


class Mlp:
    """Fully connected tanh network with a linear output layer.

    Parameters are laid out as W1, b1, W2, b2, ... with ``W`` of shape
    (fan_out, fan_in), flattened in C order.
    """

    def __init__(self, sizes):
        self.sizes = tuple(int(s) for s in sizes)
        self.shapes = [(o, i) for i, o in zip(self.sizes[:-1], self.sizes[1:])]
        self.dim = sum(o * i + o for o, i in self.shapes)

    def unpack(self, theta):
        out, k = [], 0
        for o, i in self.shapes:
            W = theta[k : k + o * i].reshape(o, i)
            k += o * i
            b = theta[k : k + o]
            k += o
            out.append((W, b))
        return out

    def init(self, rng: np.random.Generator) -> np.ndarray:
        parts = []
        for o, i in self.shapes:
            bound = 1.0 / math.sqrt(i)
            parts.append(rng.uniform(-bound, bound, size=o * i))
            parts.append(np.zeros(o))
        return np.concatenate(parts)

    def forward(self, theta, x):
        """Return the output and the list of layer inputs needed for backprop."""
        layers = self.unpack(theta)
        acts = [x]
        h = x
        for j, (W, b) in enumerate(layers):
            z = h @ W.T + b
            h = np.tanh(z) if j < len(layers) - 1 else z
            acts.append(h)
        return h, acts

    def backward(self, theta, acts, dout):
        """Per-sample parameter gradients (n, dim) given d(output)/d(scalar) per row."""
        layers = self.unpack(theta)
        n = dout.shape[0]
        grads = [None] * (2 * len(layers))
        delta = dout
        for j in range(len(layers) - 1, -1, -1):
            W, _ = layers[j]
            inp = acts[j]
            grads[2 * j] = (delta[:, :, None] * inp[:, None, :]).reshape(n, -1)
            grads[2 * j + 1] = delta
            if j > 0:
                delta = (delta @ W) * (1.0 - acts[j] ** 2)
        return np.concatenate(grads, axis=1)


class Policy:
    """Common plumbing; subclasses implement the distribution."""

    dim: int
    arch: PolicyArchitecture

    def check_theta(self, theta) -> None:
        theta = np.asarray(theta)
        if theta.shape != (self.dim,):
            raise ParameterShapeError(f"expected parameter vector of shape ({self.dim},), got {theta.shape}")

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def log_prob(self, theta, states, actions) -> np.ndarray:
        raise NotImplementedError

    def score(self, theta, states, actions) -> np.ndarray:
        raise NotImplementedError

    def sample(self, theta, states, rng):
        raise NotImplementedError


class CategoricalPolicy(Policy):
    num_actions: int

    def logits(self, theta, states):
        raise NotImplementedError

    def _logits_backward(self, theta, states, cache, dlogits):
        raise NotImplementedError

    def _forward(self, theta, states):
        return self.logits(theta, states), None

    def probs(self, theta, states) -> np.ndarray:
        z, _ = self._forward(theta, states)
        return np.exp(_log_softmax(z))

    def _check_actions(self, actions, n):
        actions = np.asarray(actions)
        if actions.shape != (n,) or actions.dtype.kind not in "iu":
            if actions.shape == (n,) and np.all(np.mod(actions, 1) == 0):
                actions = actions.astype(np.int64)
            else:
                raise InvalidActionError(f"expected {n} integer actions, got {actions!r}")
        if n and (actions.min() < 0 or actions.max() >= self.num_actions):
            raise InvalidActionError(f"action ids must lie in [0, {self.num_actions})")
        return actions

    def log_prob(self, theta, states, actions):
        z, _ = self._forward(theta, states)
        actions = self._check_actions(actions, len(z))
        return _log_softmax(z)[np.arange(len(z)), actions]

    def score(self, theta, states, actions):
        z, cache = self._forward(theta, states)
        actions = self._check_actions(actions, len(z))
        d = -np.exp(_log_softmax(z))
        d[np.arange(len(z)), actions] += 1.0
        return self._logits_backward(theta, states, cache, d)

    def sample(self, theta, states, rng):
        z, _ = self._forward(theta, states)
        logp = _log_softmax(z)
        cdf = np.cumsum(np.exp(logp), axis=1)
        u = rng.random(len(z))[:, None] * cdf[:, -1:]
        a = np.minimum((cdf <= u).sum(axis=1), self.num_actions - 1)
        return a, logp[np.arange(len(z)), a]


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    zs = z - m
    return zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))


class TabularSoftmax(CategoricalPolicy):
    """One logit per (state, action); theta is the flattened (S, A) table."""

    def __init__(self, num_states: int, num_actions: int):
        self.num_states = num_states
        self.num_actions = num_actions
        self.dim = num_states * num_actions
        self.arch = PolicyArchitecture("tabular-softmax", num_states, num_actions)

    def init_params(self, rng=None):
        return np.zeros(self.dim)

    def _states(self, states):
        states = np.asarray(states)
        if states.size and (states.min() < 0 or states.max() >= self.num_states):
            raise InvalidActionError(f"state ids must lie in [0, {self.num_states})")
        return states.astype(np.int64)

    def logits(self, theta, states):
        return self._forward(theta, states)[0]

    def _forward(self, theta, states):
        # the validated state ids double as the backward cache
        states = self._states(states)
        return np.asarray(theta, dtype=np.float64).reshape(self.num_states, self.num_actions)[states], states

    def _logits_backward(self, theta, states, cache, dlogits):
        states = cache
        n = len(states)
        out = np.zeros((n, self.num_states, self.num_actions))
        out[np.arange(n), states] = dlogits
        return out.reshape(n, self.dim)

    def log_prob_hessian(self, theta, states, actions):
        """Analytic Hessians of log pi(a|s), shape (n, dim, dim).

        Only the (s, s) logit block is nonzero and equals -(diag(p) - p p^T);
        it does not depend on the action taken.
        """
        states = self._states(states)
        self._check_actions(actions, len(states))
        p = self.probs(theta, states)
        n, A = p.shape
        out = np.zeros((n, self.num_states, A, self.num_states, A))
        block = p[:, :, None] * p[:, None, :] - np.einsum("ij,jk->ijk", p, np.eye(A))
        idx = np.arange(n)
        out[idx, states, :, states, :] = block
        return out.reshape(n, self.dim, self.dim)


class LinearSoftmax(CategoricalPolicy):
    """Logits W phi(s) + b with W of shape (A, F)."""

    def __init__(self, obs_dim: int, num_actions: int):
        self.obs_dim = obs_dim
        self.num_actions = num_actions
        self.dim = num_actions * (obs_dim + 1)
        self.arch = PolicyArchitecture("linear-softmax", obs_dim, num_actions)

    def init_params(self, rng=None):
        return np.zeros(self.dim)

    def _split(self, theta):
        M = np.asarray(theta, dtype=np.float64).reshape(self.num_actions, self.obs_dim + 1)
        return M[:, :-1], M[:, -1]

    def logits(self, theta, states):
        W, b = self._split(theta)
        return np.atleast_2d(np.asarray(states, dtype=np.float64)) @ W.T + b

    def _logits_backward(self, theta, states, cache, dlogits):
        x = np.atleast_2d(np.asarray(states, dtype=np.float64))
        xb = np.concatenate([x, np.ones((len(x), 1))], axis=1)
        return (dlogits[:, :, None] * xb[:, None, :]).reshape(len(x), -1)


class MlpSoftmax(CategoricalPolicy):
    """Tanh MLP producing action logits."""

    def __init__(self, obs_dim: int, num_actions: int, hidden=(8, 8)):
        self.obs_dim = obs_dim
        self.num_actions = num_actions
        self.net = Mlp((obs_dim, *hidden, num_actions))
        self.dim = self.net.dim
        self.arch = PolicyArchitecture("mlp-softmax", obs_dim, num_actions, tuple(hidden))

    def init_params(self, rng):
        return self.net.init(rng)

    def _forward(self, theta, states):
        x = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return self.net.forward(np.asarray(theta, dtype=np.float64), x)

    def logits(self, theta, states):
        return self._forward(theta, states)[0]

    def _logits_backward(self, theta, states, cache, dlogits):
        return self.net.backward(np.asarray(theta, dtype=np.float64), cache, dlogits)


class GaussianPolicy(Policy):
    """Diagonal Gaussian with a state-independent trainable log-std.

    theta = [mean-network parameters, log_std (act_dim)].
    """

    act_dim: int
    mean_dim: int

    def _mean(self, theta, states):
        raise NotImplementedError

    def _mean_backward(self, theta, cache, dmean):
        raise NotImplementedError

    def _log_std(self, theta):
        return np.asarray(theta, dtype=np.float64)[self.mean_dim :]

    def mean(self, theta, states):
        return self._mean(theta, states)[0]

    def _check_actions(self, actions, n):
        actions = np.asarray(actions, dtype=np.float64)
        if actions.ndim == 1 and self.act_dim == 1 and actions.shape == (n,):
            actions = actions[:, None]
        if actions.shape != (n, self.act_dim):
            raise InvalidActionError(f"expected actions of shape ({n}, {self.act_dim}), got {actions.shape}")
        if not np.all(np.isfinite(actions)):
            raise InvalidActionError("Gaussian actions must be finite")
        return actions

    def log_prob(self, theta, states, actions):
        mu, _ = self._mean(theta, states)
        a = self._check_actions(actions, len(mu))
        log_std = self._log_std(theta)
        z = (a - mu) * np.exp(-log_std)
        return -0.5 * np.sum(z**2, axis=1) - np.sum(log_std) - 0.5 * self.act_dim * _LOG_2PI

    def score(self, theta, states, actions):
        mu, cache = self._mean(theta, states)
        a = self._check_actions(actions, len(mu))
        log_std = self._log_std(theta)
        inv_var = np.exp(-2.0 * log_std)
        dmean = (a - mu) * inv_var
        dlog_std = (a - mu) ** 2 * inv_var - 1.0
        return np.concatenate([self._mean_backward(theta, cache, dmean), dlog_std], axis=1)

    def sample(self, theta, states, rng):
        mu, _ = self._mean(theta, states)
        log_std = self._log_std(theta)
        eps = rng.standard_normal(mu.shape)
        a = mu + np.exp(log_std) * eps
        logp = -0.5 * np.sum(eps**2, axis=1) - np.sum(log_std) - 0.5 * self.act_dim * _LOG_2PI
        return a, logp


class LinearGaussian(GaussianPolicy):
    def __init__(self, obs_dim: int, act_dim: int):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.mean_dim = act_dim * (obs_dim + 1)
        self.dim = self.mean_dim + act_dim
        self.arch = PolicyArchitecture("linear-gaussian", obs_dim, act_dim)

    def init_params(self, rng=None):
        return np.zeros(self.dim)

    def _mean(self, theta, states):
        M = np.asarray(theta, dtype=np.float64)[: self.mean_dim].reshape(self.act_dim, self.obs_dim + 1)
        x = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return x @ M[:, :-1].T + M[:, -1], x

    def _mean_backward(self, theta, x, dmean):
        xb = np.concatenate([x, np.ones((len(x), 1))], axis=1)
        return (dmean[:, :, None] * xb[:, None, :]).reshape(len(x), -1)


class MlpGaussian(GaussianPolicy):
    def __init__(self, obs_dim: int, act_dim: int, hidden=(64, 64)):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.net = Mlp((obs_dim, *hidden, act_dim))
        self.mean_dim = self.net.dim
        self.dim = self.mean_dim + act_dim
        self.arch = PolicyArchitecture("mlp-gaussian", obs_dim, act_dim, tuple(hidden))

    def init_params(self, rng):
        return np.concatenate([self.net.init(rng), np.zeros(self.act_dim)])

    def _mean(self, theta, states):
        x = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return self.net.forward(np.asarray(theta, dtype=np.float64)[: self.mean_dim], x)

    def _mean_backward(self, theta, cache, dmean):
        return self.net.backward(np.asarray(theta, dtype=np.float64)[: self.mean_dim], cache, dmean)


# -- single-sample conveniences --

def _one(state):
    return np.asarray([state]) if np.ndim(state) == 0 else np.asarray(state)[None]


def action_log_prob(policy: Policy, theta, state, action) -> float:
    """log pi_theta(a|s) for a single state/action pair."""
    policy.check_theta(theta)
    return float(policy.log_prob(theta, _one(state), _one(action))[0])


def sample_action(policy: Policy, theta, state, rng):
    policy.check_theta(theta)
    a, logp = policy.sample(theta, _one(state), rng)
    return a[0], float(logp[0])


def score(policy: Policy, theta, state, action) -> np.ndarray:
    """Gradient of log pi_theta(a|s) with respect to theta."""
    policy.check_theta(theta)
    return policy.score(theta, _one(state), _one(action))[0]


def step_scores(policy: Policy, theta, traj) -> np.ndarray:
    return policy.score(theta, traj.states, traj.actions)


def trajectory_score(policy: Policy, theta, traj) -> np.ndarray:
    """grad log p(tau|theta); transition terms do not depend on theta."""
    return step_scores(policy, theta, traj).sum(axis=0)


def trajectory_log_prob(policy: Policy, theta, traj) -> float:
    """Sum of log pi(a_h|s_h); transition terms are omitted since they cancel in ratios."""
    return float(np.sum(policy.log_prob(theta, traj.states, traj.actions)))


# -- checkpoints --

def save_checkpoint(policy: Policy, theta, path) -> None:
    policy.check_theta(theta)
    arch = asdict(policy.arch)
    arch["hidden"] = list(arch["hidden"])
    payload = {"architecture": arch, "theta": [float(x) for x in theta]}
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> tuple[Policy, np.ndarray]:
    data = json.loads(Path(path).read_text())
    arch = data["architecture"]
    policy = make_policy(PolicyArchitecture(arch["kind"], arch["in_dim"], arch["out_dim"], tuple(arch["hidden"])))
    theta = np.asarray(data["theta"], dtype=np.float64)
    policy.check_theta(theta)
    if not np.all(np.isfinite(theta)):
        raise ParameterShapeError("checkpoint contains non-finite parameters")
    return policy, theta
