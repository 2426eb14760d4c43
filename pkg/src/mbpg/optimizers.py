"""Training loops: IS-MBPG, HA-MBPG, IS-MBPG* and vanilla policy gradient.

All four ascend the discounted return with the PGT estimator. The
momentum variants keep a recursive gradient estimate ``u`` that mixes a
fresh stochastic gradient (weight ``beta``) with the previous estimate plus
a correction for the parameter change (weight ``1 - beta``).
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .env import rollout_batch
from .estimators import Diagnostics, HvpConfig, delta_t, importance_weight, mix, pgt
from .record import RunRecord, RunRow

ALGORITHMS = ("is-mbpg", "ha-mbpg", "is-mbpg-star", "vanilla-pg")
DIVERGENCE_NORM = 1e6


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class ScheduleParams:
    k: float
    m: float
    c: float

    def __post_init__(self):
        for name in ("k", "m", "c"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ValueError(f"schedule parameter {name} must be finite and positive, got {val}")


@dataclass
class TrainConfig:
    algo: str = "is-mbpg"
    env: str = "cartpole"
    batch: int = 1
    probes: int = 500_000
    horizon: int = 100
    gamma: float = 0.99
    k: float = 0.75
    m: float = 2.0
    c: float = 2.0
    lr: float = 0.01
    clip_low: float = 1e-4
    clip_high: float = 1e4
    hvp_delta: float = 1e-4
    seed: int = 0
    hidden: tuple = (8, 8)
    record_wall_time: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        def bad(key, why):
            raise ValueError(f"{key}: {why}")

        if self.algo not in ALGORITHMS:
            bad("algo", f"must be one of {ALGORITHMS}, got {self.algo!r}")
        if not isinstance(self.batch, int) or self.batch < 1:
            bad("batch", f"must be an integer >= 1, got {self.batch!r}")
        if not isinstance(self.horizon, int) or self.horizon < 1:
            bad("horizon", f"must be an integer >= 1, got {self.horizon!r}")
        if not isinstance(self.probes, int) or self.probes < self.horizon:
            bad("probes", f"budget must be an integer >= horizon ({self.horizon}), got {self.probes!r}")
        if not 0.0 < self.gamma <= 1.0:
            bad("gamma", f"must lie in (0, 1], got {self.gamma}")
        for key in ("k", "m", "c", "lr"):
            val = getattr(self, key)
            if not (math.isfinite(val) and val > 0):
                bad(key, f"must be finite and positive, got {val}")
        if not 0.0 < self.clip_low < self.clip_high:
            bad("clip_low", "clip window must satisfy 0 < clip_low < clip_high")
        if not 1e-8 <= self.hvp_delta <= 1e-2:
            bad("hvp_delta", f"must lie in [1e-8, 1e-2], got {self.hvp_delta}")
        if not isinstance(self.seed, int) or self.seed < 0:
            bad("seed", f"must be a non-negative integer, got {self.seed!r}")
        if not self.hidden or any(h < 1 for h in self.hidden):
            bad("hidden", "needs at least one positive layer size")

    @property
    def schedule(self) -> ScheduleParams:
        return ScheduleParams(self.k, self.m, self.c)

    @property
    def clip(self) -> tuple[float, float]:
        return (self.clip_low, self.clip_high)


def eta_adaptive(sp: ScheduleParams, sum_G_sq: float) -> float:
    """k / (m + sum of squared gradient norms)^(1/3)."""
    if sum_G_sq < 0:
        raise ValueError("sum_G_sq must be non-negative")
    return sp.k / (sp.m + sum_G_sq) ** (1.0 / 3.0)


def eta_nonadaptive(sp: ScheduleParams, t: int) -> float:
    if t < 1:
        raise ValueError("t must be >= 1")
    return sp.k / (sp.m + t) ** (1.0 / 3.0)


def beta_next(sp: ScheduleParams, eta: float) -> float:
    """c * eta^2, clamped to at most 1."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    return min(sp.c * eta * eta, 1.0)


def is_mbpg_combine(u_prev, g_new, g_old, w: float, beta: float) -> np.ndarray:
    return beta * g_new + (1.0 - beta) * (u_prev + g_new - w * g_old)


def ha_mbpg_combine(u_prev, g_t, w: float, delta, beta: float) -> np.ndarray:
    return beta * w * g_t + (1.0 - beta) * (u_prev + delta)


class UniformIterate:
    """Reservoir of size one: after T offers, each iterate is held with probability 1/T."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.count = 0
        self.value = None

    def offer(self, theta) -> None:
        self.count += 1
        if self.rng.random() * self.count < 1.0:
            self.value = np.array(theta, copy=True)


@dataclass
class OptimizerState:
    u: np.ndarray
    sum_G_sq: float = 0.0
    eta: float = 0.0
    beta: float = 1.0
    t: int = 0
    history: list | None = field(default_factory=list)


def _check_finite(state: OptimizerState, theta, diag: Diagnostics):
    if not np.all(np.isfinite(state.u)):
        raise TrainingAborted(
            f"non-finite momentum gradient at iteration {state.t}: |theta|={np.linalg.norm(theta):.6g}, "
            f"eta={state.eta:.6g}, beta={state.beta:.6g}, weight overflows={diag.weight_overflows}"
        )


def _mean(vectors):
    return np.mean(np.stack(vectors), axis=0)


def train(cfg: TrainConfig, env, policy, rng: np.random.Generator, theta0=None, *,
          force_beta: float | None = None, on_iterate=None, history_cap: int = 10**6):
    """Run one of the momentum algorithms (or vanilla PG) until the probe budget is spent.

    Returns ``(theta_out, record)`` where ``theta_out`` is drawn uniformly
    from the visited iterates theta_1..theta_T. ``on_iterate(t, theta)`` is
    called with every iterate before it is updated.
    """
    if cfg.algo == "vanilla-pg":
        return vanilla_pg_train(cfg, env, policy, rng, theta0, on_iterate=on_iterate)

    theta = policy.init_params(rng) if theta0 is None else np.array(theta0, dtype=np.float64)
    policy.check_theta(theta)
    sp = cfg.schedule
    hvp = HvpConfig(cfg.hvp_delta, relative=True)
    diag = Diagnostics()
    picker = UniformIterate(np.random.default_rng(rng.integers(2**63)))
    state = OptimizerState(u=np.zeros_like(theta))
    record = RunRecord(metadata=_metadata(cfg, policy))
    theta_prev = None
    probes = 0
    start = time.perf_counter()

    while probes < cfg.probes:
        state.t += 1
        t = state.t
        beta = state.beta if force_beta is None else force_beta
        alpha = None
        if cfg.algo == "ha-mbpg" and t > 1:
            alpha = float(rng.random())
            trajs = rollout_batch(env, policy, mix(theta, theta_prev, alpha), rng, cfg.horizon, cfg.batch)
        else:
            trajs = rollout_batch(env, policy, theta, rng, cfg.horizon, cfg.batch)
        probes += sum(tr.length for tr in trajs)

        g_new = _mean([pgt(tr, policy, theta, cfg.gamma) for tr in trajs])
        if t == 1:
            state.u = g_new
            beta = 1.0
        elif alpha is None:
            corr = _mean([
                importance_weight(tr, policy, theta_prev, theta, cfg.clip, diag).clipped
                * pgt(tr, policy, theta_prev, cfg.gamma)
                for tr in trajs
            ])
            state.u = is_mbpg_combine(state.u, g_new, corr, 1.0, beta)
        else:
            theta_a = mix(theta, theta_prev, alpha)
            weighted = _mean([
                importance_weight(tr, policy, theta, theta_a, cfg.clip, diag).clipped
                * pgt(tr, policy, theta, cfg.gamma)
                for tr in trajs
            ])
            delta = _mean([delta_t(tr, policy, theta, theta_prev, alpha, hvp, cfg.gamma) for tr in trajs])
            state.u = ha_mbpg_combine(state.u, weighted, 1.0, delta, beta)

        G = float(np.linalg.norm(g_new))
        state.sum_G_sq += G * G
        if cfg.algo == "is-mbpg-star":
            state.eta = eta_nonadaptive(sp, t)
        else:
            state.eta = eta_adaptive(sp, state.sum_G_sq)
        state.beta = beta
        _check_finite(state, theta, diag)

        record.append(_row(t, probes, trajs, G, state.eta, beta, start, cfg))
        picker.offer(theta)
        _remember(state, theta, history_cap)
        if on_iterate is not None:
            on_iterate(t, theta)

        theta_prev = theta
        theta = theta + state.eta * state.u
        _guard(theta, state, diag)
        state.beta = beta_next(sp, state.eta)

    record.metadata["weight_overflows"] = diag.weight_overflows
    return picker.value, record


def vanilla_pg_train(cfg: TrainConfig, env, policy, rng: np.random.Generator, theta0=None, *,
                     lr_schedule=None, on_iterate=None):
    """Mini-batch policy gradient ascent with a constant step ``cfg.lr``.

    ``lr_schedule`` optionally supplies the step for each iteration (1-based
    position ``t - 1``) instead of the constant.
    """
    theta = policy.init_params(rng) if theta0 is None else np.array(theta0, dtype=np.float64)
    policy.check_theta(theta)
    diag = Diagnostics()
    picker = UniformIterate(np.random.default_rng(rng.integers(2**63)))
    state = OptimizerState(u=np.zeros_like(theta), history=None)
    record = RunRecord(metadata=_metadata(cfg, policy))
    probes = 0
    start = time.perf_counter()
    while probes < cfg.probes:
        state.t += 1
        trajs = rollout_batch(env, policy, theta, rng, cfg.horizon, cfg.batch)
        probes += sum(tr.length for tr in trajs)
        state.u = _mean([pgt(tr, policy, theta, cfg.gamma) for tr in trajs])
        state.eta = cfg.lr if lr_schedule is None else float(lr_schedule[state.t - 1])
        _check_finite(state, theta, diag)
        G = float(np.linalg.norm(state.u))
        state.sum_G_sq += G * G
        record.append(_row(state.t, probes, trajs, G, state.eta, 1.0, start, cfg))
        picker.offer(theta)
        if on_iterate is not None:
            on_iterate(state.t, theta)
        theta = theta + state.eta * state.u
        _guard(theta, state, diag)
    return picker.value, record


def _row(t, probes, trajs, G, eta, beta, start, cfg) -> RunRow:
    avg = float(np.mean([tr.undiscounted_return for tr in trajs]))
    wall = int((time.perf_counter() - start) * 1000) if cfg.record_wall_time else 0
    return RunRow(t, probes, avg, G, eta, beta, wall)


def _remember(state: OptimizerState, theta, cap: int) -> None:
    if state.history is None:
        return
    if (len(state.history) + 1) * len(theta) > cap:
        state.history = None
        return
    state.history.append(np.array(theta, copy=True))


def _guard(theta, state: OptimizerState, diag: Diagnostics) -> None:
    norm = float(np.linalg.norm(theta))
    if not math.isfinite(norm) or norm > DIVERGENCE_NORM:
        raise TrainingAborted(
            f"parameters diverged after iteration {state.t}: |theta|={norm:.6g}, eta={state.eta:.6g}, "
            f"beta={state.beta:.6g}, weight overflows={diag.weight_overflows}"
        )


def _metadata(cfg: TrainConfig, policy) -> dict:
    conf = asdict(cfg)
    conf["hidden"] = list(conf["hidden"])
    return {"config": conf, "seed": cfg.seed, "policy": policy.arch.kind, "dim": policy.dim,
            "build": f"mbpg {__version__}"}
