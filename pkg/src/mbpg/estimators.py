"""Per-trajectory gradient objects.

All estimators return plain ``numpy`` vectors of the policy's dimension.
Baselines may be a scalar or one value per step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .policy import Policy, step_scores, trajectory_log_prob, trajectory_score

MAX_ORACLE_DIM = 64
DEFAULT_CLIP = (1e-4, 1e4)
# largest log value whose exp is finite in double precision
_LOG_MAX = math.log(np.finfo(np.float64).max)


class OracleScopeError(ValueError):
    pass


@dataclass
class Diagnostics:
    """Mutable per-run counters (owned by the caller)."""

    weight_overflows: int = 0


@dataclass(frozen=True)
class ImportanceWeight:
    raw: float
    clipped: float
    log_raw: float


@dataclass(frozen=True)
class HvpConfig:
    """Finite-difference step for Hessian-vector products.

    By default the perturbation is rescaled so that
    ``||step * v|| == delta * (1 + ||theta||)``; ``relative=False`` uses
    ``delta`` as the raw step along ``v``.
    """

    delta: float = 1e-4
    relative: bool = True

    def __post_init__(self):
        if not 1e-8 <= self.delta <= 1e-2:
            raise ValueError(f"hvp delta must lie in [1e-8, 1e-2], got {self.delta}")

    def step(self, theta, v) -> float:
        if not self.relative:
            return self.delta
        nv = float(np.linalg.norm(v))
        if nv == 0.0:
            return self.delta
        return self.delta * (1.0 + float(np.linalg.norm(theta))) / nv


def _baseline(b, length):
    b = np.asarray(b, dtype=np.float64)
    if b.ndim == 0:
        return np.full(length, float(b))
    if b.shape != (length,):
        raise ValueError(f"per-step baseline must have length {length}")
    return b


def discounted_rewards(traj, gamma: float) -> np.ndarray:
    return gamma ** np.arange(traj.length, dtype=np.float64) * traj.rewards


def rewards_to_go(traj, gamma: float, baseline=0.0) -> np.ndarray:
    """Entry h is sum_{j>=h} (gamma^j r_j - b_j)."""
    x = discounted_rewards(traj, gamma)
    if not (np.isscalar(baseline) and baseline == 0):
        x = x - _baseline(baseline, traj.length)
    return np.cumsum(x[::-1])[::-1]


def pgt(traj, policy: Policy, theta, gamma: float, baseline=0.0) -> np.ndarray:
    scores = step_scores(policy, theta, traj)
    return scores.T @ rewards_to_go(traj, gamma, baseline)


def gpomdp(traj, policy: Policy, theta, gamma: float, baseline=0.0) -> np.ndarray:
    scores = np.cumsum(step_scores(policy, theta, traj), axis=0)
    return scores.T @ (discounted_rewards(traj, gamma) - _baseline(baseline, traj.length))


def reinforce(traj, policy: Policy, theta, gamma: float, baseline: float = 0.0) -> np.ndarray:
    total = float(np.sum(discounted_rewards(traj, gamma)))
    return trajectory_score(policy, theta, traj) * (total - baseline)


ESTIMATORS = {"pgt": pgt, "gpomdp": gpomdp, "reinforce": reinforce}


def importance_weight(traj, policy: Policy, theta_num, theta_den, clip=None,
                      diagnostics: Diagnostics | None = None) -> ImportanceWeight:
    """w(tau | theta_num, theta_den) = p(tau|theta_num) / p(tau|theta_den), in log space.

    An exponent that would overflow saturates to the upper clip bound (or the
    largest finite double without clipping) and bumps the overflow counter.
    """
    log_raw = trajectory_log_prob(policy, theta_num, traj) - trajectory_log_prob(policy, theta_den, traj)
    hi = clip[1] if clip is not None else np.finfo(np.float64).max
    if log_raw > _LOG_MAX or math.isnan(log_raw):
        if diagnostics is not None:
            diagnostics.weight_overflows += 1
        raw = hi
    else:
        raw = math.exp(log_raw)
    clipped = raw if clip is None else min(max(raw, clip[0]), clip[1])
    return ImportanceWeight(raw=raw, clipped=clipped, log_raw=log_raw)


def phi_value(traj, policy: Policy, theta, gamma: float) -> float:
    """Phi(tau|theta) = sum_h [sum_{j>=h} gamma^j r_j] log pi(a_h|s_h)."""
    logp = policy.log_prob(theta, traj.states, traj.actions)
    return float(np.dot(rewards_to_go(traj, gamma), logp))


def phi_grad(traj, policy: Policy, theta, gamma: float) -> np.ndarray:
    return pgt(traj, policy, theta, gamma, 0.0)


def hvp_phi_fd(traj, policy: Policy, theta, v, cfg: HvpConfig, gamma: float) -> np.ndarray:
    """Central-difference estimate of (Hessian of Phi) @ v."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("direction must be finite")
    if not np.any(v):
        return np.zeros_like(theta)
    d = cfg.step(theta, v)
    plus = step_scores(policy, theta + d * v, traj)
    minus = step_scores(policy, theta - d * v, traj)
    return (plus - minus).T @ rewards_to_go(traj, gamma) / (2.0 * d)


def phi_hessian(traj, policy: Policy, theta, gamma: float, cfg: HvpConfig | None = None) -> np.ndarray:
    """Hessian of Phi: analytic when the policy provides log-prob Hessians, else FD by columns."""
    theta = np.asarray(theta, dtype=np.float64)
    hess_fn = getattr(policy, "log_prob_hessian", None)
    if hess_fn is not None:
        hs = hess_fn(theta, traj.states, traj.actions)
        return np.tensordot(rewards_to_go(traj, gamma), hs, axes=1)
    cfg = cfg or HvpConfig()
    eye = np.eye(len(theta))
    return np.stack([hvp_phi_fd(traj, policy, theta, eye[i], cfg, gamma) for i in range(len(theta))], axis=1)


def hvp_phi_exact(traj, policy: Policy, theta, v, gamma: float) -> np.ndarray:
    return phi_hessian(traj, policy, theta, gamma) @ np.asarray(v, dtype=np.float64)


def hessian_estimate(traj, policy: Policy, theta, gamma: float, cfg: HvpConfig | None = None) -> np.ndarray:
    """grad Phi (grad log p)^T + Hessian of Phi; unbiased for the Hessian of J."""
    if policy.dim > MAX_ORACLE_DIM:
        raise OracleScopeError(f"hessian_estimate is limited to dim <= {MAX_ORACLE_DIM}, got {policy.dim}")
    g_phi = phi_grad(traj, policy, theta, gamma)
    g_logp = trajectory_score(policy, theta, traj)
    return np.outer(g_phi, g_logp) + phi_hessian(traj, policy, theta, gamma, cfg)


def mix(theta_t, theta_prev, alpha: float) -> np.ndarray:
    return alpha * np.asarray(theta_t) + (1.0 - alpha) * np.asarray(theta_prev)


def delta_t(traj, policy: Policy, theta_t, theta_prev, alpha: float, cfg: HvpConfig, gamma: float) -> np.ndarray:
    """Hessian-aided estimate of grad J(theta_t) - grad J(theta_prev).

    ``traj`` must be drawn from the mixed point alpha*theta_t + (1-alpha)*theta_prev.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    v = np.asarray(theta_t, dtype=np.float64) - np.asarray(theta_prev, dtype=np.float64)
    if not np.any(v):
        return np.zeros_like(v)
    theta_a = mix(theta_t, theta_prev, alpha)
    scores = step_scores(policy, theta_a, traj)
    coef = float(np.dot(scores.sum(axis=0), v))
    grad_phi = scores.T @ rewards_to_go(traj, gamma)
    return coef * grad_phi + hvp_phi_fd(traj, policy, theta_a, v, cfg, gamma)
