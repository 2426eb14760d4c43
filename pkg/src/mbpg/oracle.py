"""Exact quantities on enumerable tabular MDPs.

Everything here is deterministic: expectations are finite sums over
:func:`mbpg.env.enumerate_trajectories`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import TabularMdpSpec, discounted_return, enumerate_trajectories
from .estimators import MAX_ORACLE_DIM, OracleScopeError
from .policy import trajectory_score

DEFAULT_HESSIAN_DELTA = 1e-4


@dataclass
class OracleReport:
    exact_value: np.ndarray | None
    estimator_mean: np.ndarray
    abs_error: float
    estimator_variance: float


def _weighted_sum(probs, values):
    values = np.asarray(values, dtype=np.float64)
    return np.tensordot(np.asarray(probs), values, axes=1)


def exact_J(mdp: TabularMdpSpec, policy, theta) -> float:
    trajs = enumerate_trajectories(mdp, policy, theta)
    probs = [p for _, p in trajs]
    returns = [discounted_return(t, mdp.discount) for t, _ in trajs]
    return float(_weighted_sum(probs, returns))


def dp_J(mdp: TabularMdpSpec, policy, theta) -> float:
    """Finite-horizon backward induction; independent of enumeration."""
    S, A = mdp.num_states, mdp.num_actions
    ss = np.repeat(np.arange(S), A)
    aa = np.tile(np.arange(A), S)
    pi = np.exp(policy.log_prob(theta, ss, aa)).reshape(S, A)
    value = np.zeros(S)
    for _ in range(mdp.horizon):
        q = mdp.reward + mdp.discount * mdp.transition @ value
        value = np.sum(pi * q, axis=1)
    return float(mdp.initial_dist @ value)


def exact_grad_J(mdp: TabularMdpSpec, policy, theta) -> np.ndarray:
    trajs = enumerate_trajectories(mdp, policy, theta)
    probs = [p for _, p in trajs]
    vals = [trajectory_score(policy, theta, t) * discounted_return(t, mdp.discount) for t, _ in trajs]
    return _weighted_sum(probs, vals)


def fd_hessian(grad_fn, theta, delta: float = DEFAULT_HESSIAN_DELTA, relative: bool = True):
    """Unsymmetrised central-difference Jacobian of ``grad_fn`` (column i = d grad / d theta_i)."""
    theta = np.asarray(theta, dtype=np.float64)
    step = delta * (1.0 + np.linalg.norm(theta)) if relative else delta
    cols = []
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = step
        cols.append((grad_fn(theta + e) - grad_fn(theta - e)) / (2.0 * step))
    return np.stack(cols, axis=1)


def exact_hessian_J(mdp: TabularMdpSpec, policy, theta, delta: float = DEFAULT_HESSIAN_DELTA) -> np.ndarray:
    """Central differences of the exact gradient (step relative to 1 + ||theta||), symmetrised."""
    if policy.dim > MAX_ORACLE_DIM:
        raise OracleScopeError(f"exact Hessian is limited to dim <= {MAX_ORACLE_DIM}")
    H = fd_hessian(lambda x: exact_grad_J(mdp, policy, x), theta, delta)
    return 0.5 * (H + H.T)


def estimator_moments(estimator, mdp: TabularMdpSpec, policy, theta, target=None) -> OracleReport:
    """Exact mean and total variance of a per-trajectory estimator under p(.|theta).

    ``estimator`` is called as ``estimator(traj)`` and may return a scalar,
    vector or matrix; variance is the trace of the covariance (sum of
    squared deviations).
    """
    trajs = enumerate_trajectories(mdp, policy, theta)
    probs = np.array([p for _, p in trajs])
    vals = np.array([np.asarray(estimator(t), dtype=np.float64) for t, _ in trajs])
    mean = _weighted_sum(probs, vals)
    dev = (vals - mean).reshape(len(vals), -1)
    var = float(probs @ np.sum(dev**2, axis=1))
    err = float("nan") if target is None else float(np.max(np.abs(mean - np.asarray(target))))
    return OracleReport(exact_value=None if target is None else np.asarray(target),
                        estimator_mean=mean, abs_error=err, estimator_variance=var)


def expectation(fn, mdp: TabularMdpSpec, policy, theta):
    """sum_tau p(tau|theta) fn(tau)."""
    return estimator_moments(fn, mdp, policy, theta).estimator_mean
