"""Rollout metrics, experiment specs, and the repeated-evaluation runner."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .agent import PolicyHandle, PolicyKind, load_policy, make_policy
from .data import ItemCatalog, synth_catalog
from .env import EnvConfig, SlateEnv, make_ground_truth_user, rollout
from .training import UserModel, load_user_model


def metric_avg_cum_reward(rollout_rewards: Sequence[Sequence[float]]) -> float:
    """Time-average each user's rewards first, then average across users."""
    if not rollout_rewards:
        raise ValueError("no rollouts")
    per_user = []
    for rewards in rollout_rewards:
        if len(rewards) == 0:
            raise ValueError("rollout with zero steps")
        per_user.append(float(np.mean(rewards)))
    return float(np.mean(per_user))


def metric_ctr(user_clicks_steps: Sequence[tuple[int, int]]) -> float:
    """Per-user clicks/steps, averaged across users."""
    if not user_clicks_steps:
        raise ValueError("no rollouts")
    rates = []
    for clicks, steps in user_clicks_steps:
        if steps <= 0:
            raise ValueError("rollout with zero steps")
        rates.append(clicks / steps)
    return float(np.mean(rates))


@dataclass
class MetricReport:
    policy: str
    n_users: int
    horizon: int
    repetitions: int
    avg_cumulative_reward: float
    std_cumulative_reward: float
    stderr_cumulative_reward: float
    ctr: float
    std_ctr: float
    stderr_ctr: float
    prec_at: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.ctr <= 1.0):
            raise ValueError(f"ctr out of range: {self.ctr}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


@dataclass
class RosterEntry:
    name: str
    kind: PolicyKind
    path: str | None = None


@dataclass
class ExperimentSpec:
    seed: int = 0
    catalog_size: int = 30
    dim: int = 8
    catalog_seed: int = 1
    user_model_path: str | None = None
    gt_m: int = 5
    gt_n: int = 4
    gt_hidden: int = 16
    gt_seed: int = 1
    gt_reward_scale: float = 1.0
    env: EnvConfig = field(default_factory=EnvConfig)
    n_users: int = 20
    repetitions: int = 50
    out_dir: str = "out"
    roster: list[RosterEntry] = field(default_factory=lambda: [RosterEntry("random", PolicyKind.RANDOM)])

    def __post_init__(self):
        if self.repetitions < 1 or self.n_users < 1:
            raise ValueError("repetitions and n_users must be >= 1")


def eval_env_seed(base_seed: int, user: int, rep: int, n_users: int) -> int:
    """Evaluation episodes live on odd seeds, disjoint from even training seeds."""
    return 2 * (base_seed + rep * n_users + user) + 1


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def build_experiment_env(spec: ExperimentSpec) -> tuple[SlateEnv, UserModel, ItemCatalog]:
    catalog = synth_catalog(spec.catalog_size, spec.dim, spec.catalog_seed)
    if spec.user_model_path is not None:
        if not os.path.exists(spec.user_model_path):
            raise FileNotFoundError(f"user model checkpoint not found: {spec.user_model_path}")
        user = load_user_model(spec.user_model_path)
    else:
        user = make_ground_truth_user(catalog, (spec.gt_m, spec.gt_n, spec.gt_hidden),
                                      spec.gt_seed, spec.gt_reward_scale)
    return SlateEnv(catalog=catalog, config=spec.env), user, catalog


def _resolve_policies(spec: ExperimentSpec, catalog: ItemCatalog, user: UserModel):
    policies = []
    for entry in spec.roster:
        if entry.kind in (PolicyKind.CDQN, PolicyKind.ADDITIVE_Q):
            if entry.path is None or not os.path.exists(entry.path):
                raise FileNotFoundError(f"policy checkpoint not found: {entry.path}")
            handle = PolicyHandle(entry.kind, qnet=load_policy(entry.path))
        elif entry.kind is PolicyKind.GREEDY_USER_MODEL:
            model = user
            if entry.path is not None:
                if not os.path.exists(entry.path):
                    raise FileNotFoundError(f"user model checkpoint not found: {entry.path}")
                model = load_user_model(entry.path)
            handle = PolicyHandle(entry.kind, user_model=model)
        else:
            handle = PolicyHandle(entry.kind)
        policies.append((entry.name, make_policy(handle, catalog, spec.env.k)))
    return policies


def run_experiment(spec: ExperimentSpec) -> list[MetricReport]:
    """Evaluate every roster policy on the same fixed set of test episodes.

    Writes one per-rollout metrics file per policy plus aggregate.csv; byte
    output is deterministic for a fixed spec."""
    env, user, catalog = build_experiment_env(spec)
    policies = _resolve_policies(spec, catalog, user)
    os.makedirs(spec.out_dir, exist_ok=True)
    T = spec.env.horizon
    if T < 1:
        raise ValueError("experiment horizon must be >= 1")
    reports = []
    agg_lines = ["policy,n_users,reps,horizon,avg_cum_reward,std_cum_reward,"
                 "stderr_cum_reward,avg_ctr,std_ctr,stderr_ctr"]
    for name, policy in policies:
        rows = []
        for rep in range(spec.repetitions):
            for u in range(spec.n_users):
                seed = eval_env_seed(spec.seed, u, rep, spec.n_users)
                _, avg_reward, clicks = rollout(env, user, policy, T=T, seed=seed, user_id=u)
                rows.append((u, rep, avg_reward, clicks / T))
        lines = ["user_id,rep,cum_reward,ctr"]
        lines += [f"{u},{rep},{_fmt(cr)},{_fmt(ct)}" for u, rep, cr, ct in rows]
        with open(os.path.join(spec.out_dir, f"{name}_metrics.csv"), "w",
                  encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        per_rep_reward = np.array([
            np.mean([cr for u, rep, cr, ct in rows if rep == r]) for r in range(spec.repetitions)
        ])
        per_rep_ctr = np.array([
            np.mean([ct for u, rep, cr, ct in rows if rep == r]) for r in range(spec.repetitions)
        ])
        ddof = 1 if spec.repetitions > 1 else 0
        std_r = float(np.std(per_rep_reward, ddof=ddof))
        std_c = float(np.std(per_rep_ctr, ddof=ddof))
        report = MetricReport(
            policy=name,
            n_users=spec.n_users,
            horizon=T,
            repetitions=spec.repetitions,
            avg_cumulative_reward=float(np.mean(per_rep_reward)),
            std_cumulative_reward=std_r,
            stderr_cumulative_reward=std_r / np.sqrt(spec.repetitions),
            ctr=float(np.mean(per_rep_ctr)),
            std_ctr=std_c,
            stderr_ctr=std_c / np.sqrt(spec.repetitions),
        )
        reports.append(report)
        agg_lines.append(
            f"{name},{spec.n_users},{spec.repetitions},{T},"
            f"{_fmt(report.avg_cumulative_reward)},{_fmt(report.std_cumulative_reward)},"
            f"{_fmt(report.stderr_cumulative_reward)},{_fmt(report.ctr)},"
            f"{_fmt(report.std_ctr)},{_fmt(report.stderr_ctr)}"
        )
    with open(os.path.join(spec.out_dir, "aggregate.csv"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(agg_lines) + "\n")
    return reports
