"""Config resolution, seeded multi-run execution and result export."""
from __future__ import annotations

import argparse
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .env import CartPoleSpec, load_tabular_mdp
from .optimizers import ALGORITHMS, TrainConfig, TrainingAborted, train
from .policy import MlpSoftmax, TabularSoftmax
from .record import RunRecord, export

BUCKETS = 100


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending setting."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# flag name -> TrainConfig field
_FLAGS = {
    "algo": "algo", "env": "env", "k": "k", "m": "m", "c": "c", "lr": "lr", "batch": "batch",
    "horizon": "horizon", "gamma": "gamma", "probes": "probes", "seed": "seed",
    "clip-low": "clip_low", "clip-high": "clip_high", "hvp-delta": "hvp_delta",
}
_TYPES = {f.name: f.type for f in fields(TrainConfig)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("args", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mbpg", description="Momentum-based policy gradient benchmarks.",
                argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON config file; command-line flags override its values")
    p.add_argument("--algo", choices=ALGORITHMS)
    p.add_argument("--env", help="'cartpole' or 'tabular:<path to MDP json>'")
    for name in ("k", "m", "c", "lr", "gamma", "clip-low", "clip-high", "hvp-delta"):
        p.add_argument(f"--{name}", type=float)
    for name in ("batch", "horizon", "probes", "seed"):
        p.add_argument(f"--{name}", type=int)
    p.add_argument("--seeds", help="comma list and/or ranges, e.g. '1-10' or '1,3,5'")
    p.add_argument("--workers", type=int, help="parallel worker processes (default 1)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=("csv", "json"))
    return p


def _coerce(key: str, value):
    typ = _TYPES[key]
    if typ in ("int", int):
        if isinstance(value, bool) or not float(value).is_integer():
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    if typ in ("float", float):
        if isinstance(value, bool):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if typ in ("bool", bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if key == "hidden":
        return tuple(int(h) for h in value)
    return value


def parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ConfigError("seeds", "no seeds given")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", f"seeds must be distinct, got {seeds}")
    return seeds


def parse_config(args=None, file=None) -> TrainConfig:
    """Resolve a TrainConfig from defaults, an optional JSON file, then CLI flags."""
    ns = vars(build_parser().parse_args(list(args or [])))
    return _resolve(ns, file)[0]


def _resolve(ns: dict, file=None):
    values = {}
    file = ns.pop("config", file)
    if file is not None:
        try:
            data = json.loads(Path(file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", f"cannot read {file}: {exc}") from exc
        for key, val in data.items():
            name = key.replace("-", "_")
            if name not in _TYPES:
                raise ConfigError(key, "unknown configuration key")
            values[name] = _coerce(name, val)
    extras = {k: ns.pop(k) for k in ("seeds", "workers", "out", "format") if k in ns}
    for flag, val in ns.items():
        name = _FLAGS[flag.replace("_", "-")]
        values[name] = _coerce(name, val)
    try:
        cfg = TrainConfig(**values)
    except ValueError as exc:
        key = str(exc).split(":", 1)[0]
        raise ConfigError(key, str(exc).split(":", 1)[-1].strip()) from exc
    if cfg.env != "cartpole" and not cfg.env.startswith("tabular:"):
        raise ConfigError("env", f"expected 'cartpole' or 'tabular:<path>', got {cfg.env!r}")
    return cfg, extras


def make_env(cfg: TrainConfig):
    if cfg.env == "cartpole":
        return CartPoleSpec(horizon=cfg.horizon, discount=cfg.gamma)
    if cfg.env.startswith("tabular:"):
        mdp = load_tabular_mdp(cfg.env.split(":", 1)[1])
        return mdp
    raise ConfigError("env", f"unknown environment {cfg.env!r}")


def make_policy_for(env, cfg: TrainConfig):
    if isinstance(env, CartPoleSpec):
        return MlpSoftmax(env.obs_dim, env.num_actions, cfg.hidden)
    return TabularSoftmax(env.num_states, env.num_actions)


def run_single(cfg: TrainConfig):
    """One seeded run. The initial parameters depend only on the seed, so every
    algorithm starts from the same point for a given seed."""
    env = make_env(cfg)
    policy = make_policy_for(env, cfg)
    init_ss, train_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    theta0 = policy.init_params(np.random.default_rng(init_ss))
    return train(cfg, env, policy, np.random.default_rng(train_ss), theta0)


def _run_seed(cfg: TrainConfig):
    try:
        return run_single(cfg)[1], None
    except (TrainingAborted, FloatingPointError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


@dataclass
class SuiteResult:
    seeds: list[int]
    records: list[RunRecord | None]
    failures: dict[int, str] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    @property
    def ok(self) -> list[RunRecord]:
        return [r for r in self.records if r is not None]


def run_suite(cfg: TrainConfig, seeds, workers: int = 1) -> SuiteResult:
    """Run ``cfg`` once per seed. Results are ordered by seed regardless of scheduling."""
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("seeds", "at least one seed is required")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", f"seeds must be distinct, got {seeds}")
    cfgs = [replace(cfg, seed=s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_seed, cfgs))
    else:
        outcomes = [_run_seed(c) for c in cfgs]
    res = SuiteResult(seeds=seeds, records=[rec for rec, _ in outcomes])
    res.failures = {s: err for s, (_, err) in zip(seeds, outcomes) if err is not None}
    res.summary = aggregate(res.ok, cfg.probes)
    return res


def bucket_curve(record: RunRecord, edges) -> np.ndarray:
    """avg_return of the latest iteration with system_probes <= edge (nan before the first)."""
    probes = np.array(record.column("system_probes"))
    rets = np.array(record.column("avg_return"))
    idx = np.searchsorted(probes, edges, side="right") - 1
    out = np.full(len(edges), np.nan)
    out[idx >= 0] = rets[idx[idx >= 0]]
    return out


def aggregate(records, budget: int, buckets: int = BUCKETS) -> dict:
    """Per-bucket mean and standard deviation of return across seeds (bucket width budget/buckets)."""
    edges = np.arange(1, buckets + 1) * (budget / buckets)
    if not records:
        return {"edges": edges.tolist(), "mean": [math.nan] * buckets, "std": [math.nan] * buckets}
    curves = np.stack([bucket_curve(r, edges) for r in records])
    mean, std = [], []
    for col in curves.T:
        vals = col[~np.isnan(col)]
        mean.append(float(np.mean(vals)) if len(vals) else math.nan)
        std.append(float(np.std(vals)) if len(vals) else math.nan)
    return {"edges": edges.tolist(), "mean": mean, "std": std}


def export_suite(result: SuiteResult, out_dir, fmt: str = "csv") -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for seed, rec in zip(result.seeds, result.records):
        if rec is not None:
            paths.append(export(rec, out_dir / f"seed_{seed}.{fmt}", fmt))
    summary = dict(result.summary)
    summary["seeds"] = result.seeds
    summary["failed_seeds"] = {str(k): v for k, v in result.failures.items()}
    path = out_dir / "summary.json"
    path.write_text(json.dumps(summary, indent=1))
    paths.append(path)
    return paths
