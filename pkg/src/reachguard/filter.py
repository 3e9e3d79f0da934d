"""Gameplay safety filter: a rollout monitor that plays the learned fallback against
the learned adversary before letting a task action through.

All monitor and filter routines are batched over states. ``run_filtered`` supports the
per-step rule (``L = 1``) and the pipelined ``L``-step schedule, in which the call made
at the start of block ``k`` decides the policy for block ``k + 1``.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .envs import EnvSpec, MarginSpec, clamp
from .nnet import Mlp
from .outcome import Trajectory

Policy = Callable[[np.ndarray], np.ndarray]


class Reason(str, enum.Enum):
    REACHED_TARGET = "reached_target"
    HIT_FAILURE = "hit_failure"
    TIMEOUT = "timeout"


REASON_CODES = (Reason.TIMEOUT, Reason.REACHED_TARGET, Reason.HIT_FAILURE)


@dataclass(frozen=True)
class FilterConfig:
    horizon: int = 30
    latency: int = 1
    criterion: str = "reach_avoid"  # or "avoid_only"
    critic_threshold: float = 0.0
    pipelined: bool | None = None  # default: pipelined iff latency > 1

    def __post_init__(self):
        if not 1 <= self.latency <= self.horizon:
            raise ValueError("need 1 <= latency <= horizon")
        if self.criterion not in ("reach_avoid", "avoid_only"):
            raise ValueError(f"unknown criterion {self.criterion!r}")

    @property
    def is_pipelined(self) -> bool:
        return self.latency > 1 if self.pipelined is None else self.pipelined

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class GameplayPolicies:
    """Frozen, deterministic players used inside the monitor."""

    ctrl: Policy  # learned fallback actor (mean action)
    dstb: Policy  # learned adversary (mean action)
    critic: Mlp | None = None

    @classmethod
    def from_checkpoint(cls, ck) -> "GameplayPolicies":
        return cls(ck.best("ctrl").mean_action, ck.best("dstb").mean_action, ck.nets.critic)


@dataclass
class MonitorVerdict:
    allow: bool
    rollout: Trajectory
    reason: Reason
    step: int  # decisive step index (horizon end for timeouts)


def shield(ctrl: Policy, margins: MarginSpec) -> Policy:
    """Fallback composition: learned actor outside T, invariant law inside T."""

    def policy(x):
        x = np.asarray(x, dtype=float)
        inside = margins.target_margin(x) >= 0
        return np.where(inside[..., None], margins.invariant_controller(x), ctrl(x))

    return policy


def shield_policy(x, ctrl: Policy, margins: MarginSpec):
    return shield(ctrl, margins)(x)


def monitor_batch(x, task: Policy | np.ndarray, cfg: FilterConfig, pols: GameplayPolicies, env: EnvSpec,
                  margins: MarginSpec, prefix_task=None, prefix_len: int = 0, record: bool = False) -> dict:
    """Simulate the gameplay rollout from every state in ``x``.

    The rollout first runs ``prefix_len`` bridging steps (task where ``prefix_task``
    is set, fallback elsewhere), then ``cfg.latency`` candidate steps of ``task``
    (a policy, or an explicit ``(latency, ctrl_dim)`` action sequence), then the
    fallback up to ``cfg.horizon`` steps after the bridge. Failure is checked at every
    simulated step from 1 on; target entry counts only once the candidate block is over.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = len(x)
    fallback = shield(pols.ctrl, margins)
    cand_end = prefix_len + cfg.latency
    total = prefix_len + cfg.horizon
    prefix_task = np.zeros(n, bool) if prefix_task is None else np.broadcast_to(prefix_task, (n,))
    decided = np.zeros(n, bool)
    allow = np.zeros(n, bool)
    reason = np.zeros(n, np.int8)  # index into REASON_CODES
    decisive = np.full(n, total)
    hist = {"states": [x], "controls": [], "disturbances": []} if record else None
    for t in range(total):
        if t < prefix_len:
            u = np.where(prefix_task[:, None], _task_action(task, x, t), fallback(x))
        elif t < cand_end:
            u = _task_action(task, x, t - prefix_len)
        else:
            u = fallback(x)
        u = clamp(np.asarray(u, dtype=float), env.ctrl_bounds)
        d = clamp(np.asarray(pols.dstb(x), dtype=float), env.dstb_bounds)
        x_next = env.dynamics(x, u, d)
        x = np.where(decided[:, None], x, x_next)
        s = t + 1
        if record:
            hist["states"].append(x)
            hist["controls"].append(u)
            hist["disturbances"].append(d)
        fail = (margins.failure_margin(x) < 0) & ~decided
        reason[fail], decisive[fail] = 2, s
        decided |= fail
        if s >= cand_end:
            win = (margins.target_margin(x) >= 0) & ~decided
            allow[win], reason[win], decisive[win] = True, 1, s
            decided |= win
        if decided.all():
            break
    if cfg.criterion == "avoid_only":
        allow |= ~decided
    out = {"allow": allow, "reason": reason, "step": decisive}
    if record:
        out["history"] = {k: np.stack(v) for k, v in hist.items()}
    return out


def _task_action(task, x, offset: int):
    if callable(task):
        return task(x)
    seq = np.asarray(task, dtype=float)
    return np.broadcast_to(seq[min(offset, len(seq) - 1)], (len(x), seq.shape[-1]))


def monitor(x, task, cfg: FilterConfig, pols: GameplayPolicies, env: EnvSpec, margins: MarginSpec,
            prefix_task: bool = False, prefix_len: int = 0) -> MonitorVerdict:
    """Single-state monitor returning the simulated rollout as replayable evidence."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite state")
    res = monitor_batch(x[None], task, cfg, pols, env, margins, np.array([prefix_task]), prefix_len, record=True)
    h = res["history"]
    k = int(res["step"][0])
    states = h["states"][: k + 1, 0]
    if not (np.all(np.isfinite(h["controls"][:k, 0])) and np.all(np.isfinite(h["disturbances"][:k, 0]))):
        raise ValueError("policy returned a non-finite action inside the monitor")
    traj = Trajectory(states, h["controls"][:k, 0], h["disturbances"][:k, 0],
                      margins.failure_margin(states), margins.target_margin(states))
    return MonitorVerdict(bool(res["allow"][0]), traj, REASON_CODES[res["reason"][0]], k)


def filter_step(x, task: Policy, cfg: FilterConfig, pols: GameplayPolicies, env: EnvSpec,
                margins: MarginSpec):
    """Per-step switching rule: the task action if the monitor predicts a win, else fallback."""
    x = np.asarray(x, dtype=float)
    batch = np.atleast_2d(x)
    allow = monitor_batch(batch, task, dataclasses.replace(cfg, latency=1), pols, env, margins)["allow"]
    u = np.where(allow[:, None], task(batch), shield(pols.ctrl, margins)(batch))
    return u if x.ndim > 1 else u[0]


def critic_filter_step(x, task_action, critic: Mlp, threshold: float, fallback_action, adversary: Policy):
    """Value-threshold baseline: keep the task action while ``Q(x, u_task, d_hat) >= threshold``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    task_action = np.atleast_2d(task_action)
    q = critic.forward(np.concatenate([x, task_action, np.atleast_2d(adversary(x))], axis=-1))[:, 0]
    out = np.where((q >= threshold)[:, None], task_action, np.atleast_2d(fallback_action))
    return out


# -- closed-loop schemes (stateless, batched) -----------------------------------------


def gameplay_scheme(task: Policy, cfg: FilterConfig, pols: GameplayPolicies, env, margins) -> Policy:
    return lambda x: filter_step(x, task, cfg, pols, env, margins)


def critic_scheme(task: Policy, threshold: float, pols: GameplayPolicies, margins) -> Policy:
    fallback = shield(pols.ctrl, margins)

    def scheme(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return critic_filter_step(x, task(x), pols.critic, threshold, fallback(x), pols.dstb)

    return scheme


# -- filtered episodes --------------------------------------------------------------------


@dataclass
class EpisodeStats:
    safe: np.ndarray  # (N,) bool
    steps: np.ndarray  # executed steps per episode
    interventions: np.ndarray
    monitor_calls: int
    progress: np.ndarray  # final distance to the task goal
    time_to_goal: np.ndarray  # first step within goal_tol of the goal, -1 if never

    @property
    def safe_rate(self) -> float:
        return float(np.mean(self.safe))

    @property
    def intervention_freq(self) -> float:
        return float(np.sum(self.interventions) / max(1, np.sum(self.steps)))


def run_filtered_batch(env: EnvSpec, margins: MarginSpec, task: Policy, cfg: FilterConfig,
                       pols: GameplayPolicies, x0, episode_len: int, dstb_source: Policy,
                       scheme: str = "gameplay", monitor_fn: Callable | None = None,
                       goal_tol: float = 0.05, record: bool = False):
    """Run filtered episodes in lockstep; each stops at its first failure.

    ``scheme`` is ``"gameplay"``, ``"critic"`` or ``"none"`` (unfiltered task policy).
    ``monitor_fn(x, block)`` may replace the gameplay monitor (returns allow flags).
    """
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    n = len(x)
    L = cfg.latency
    if episode_len < L:
        raise ValueError("episode_len must be >= latency")
    fallback = shield(pols.ctrl, margins)
    alive = np.ones(n, bool)
    steps = np.zeros(n, int)
    interventions = np.zeros(n, int)
    ttg = np.full(n, -1)
    active_task = np.zeros(n, bool)
    pending = np.zeros(n, bool)
    calls = 0
    dims = list(env.position_dims)
    rows = [] if record else None

    def run_monitor(states, block, prefix_task, prefix_len):
        if monitor_fn is not None:
            return np.broadcast_to(np.asarray(monitor_fn(states, block), bool), (n,)).copy()
        return monitor_batch(states, task, cfg, pols, env, margins, prefix_task, prefix_len)["allow"]

    for k in range(episode_len):
        u_task = clamp(np.asarray(task(x), dtype=float), env.ctrl_bounds)
        if scheme == "none":
            use_task = np.ones(n, bool)
        elif scheme == "critic":
            u_crit = critic_filter_step(x, u_task, pols.critic, cfg.critic_threshold, fallback(x), pols.dstb)
            use_task = np.all(u_crit == u_task, axis=-1)
        elif cfg.is_pipelined:
            if k % L == 0:
                active_task = pending if k > 0 else np.zeros(n, bool)
                pending = run_monitor(x, k // L, active_task, L)
                calls += 1
            use_task = active_task
        else:
            use_task = run_monitor(x, k, None, 0)
            calls += 1
        u = np.where(use_task[:, None], u_task, clamp(fallback(x), env.ctrl_bounds))
        d = clamp(np.asarray(dstb_source(x), dtype=float), env.dstb_bounds)
        if record:
            rows.append((k, x.copy(), u.copy(), u_task.copy(), d.copy(), use_task.copy()))
        interventions += alive & np.any(u != u_task, axis=-1)
        x_next = env.dynamics(x, u, d)
        x = np.where(alive[:, None], x_next, x)
        steps += alive
        alive &= margins.failure_margin(x) >= 0
        near = alive & (ttg < 0) & (np.linalg.norm(x[:, dims] - env.goal[dims], axis=-1) <= goal_tol)
        ttg[near] = k + 1
    final = np.linalg.norm(x[:, dims] - env.goal[dims], axis=-1)
    stats = EpisodeStats(alive.copy(), steps, interventions, calls, final, ttg)
    if record:
        return stats, rows, x
    return stats


def run_filtered(env: EnvSpec, margins: MarginSpec, task: Policy, cfg: FilterConfig, pols: GameplayPolicies,
                 x0, episode_len: int, dstb_source: Policy, **kw):
    """Single filtered episode; returns ``(Trajectory, EpisodeStats, log_rows)``."""
    stats, rows, _ = run_filtered_batch(env, margins, task, cfg, pols, np.asarray(x0)[None], episode_len,
                                        dstb_source, record=True, **kw)
    n_exec = int(stats.steps[0])
    states = [r[1][0] for r in rows[: n_exec]]
    x_last = env.dynamics(rows[n_exec - 1][1], rows[n_exec - 1][2], rows[n_exec - 1][4])[0]
    states.append(x_last)
    states = np.array(states)
    traj = Trajectory(states, np.array([r[2][0] for r in rows[:n_exec]]), np.array([r[4][0] for r in rows[:n_exec]]),
                      margins.failure_margin(states), margins.target_margin(states))
    log = [{"k": r[0], "x": r[1][0].tolist(), "u": r[2][0].tolist(), "u_task": r[3][0].tolist(),
            "d": r[4][0].tolist(), "policy": "task" if r[5][0] else "shield"} for r in rows[:n_exec]]
    return traj, stats, log


def write_episode_log(log, path) -> None:
    """Step-per-line CSV: k, state, executed action, proposed task action, disturbance, active policy."""
    if not log:
        raise ValueError("empty episode log")
    n, m, p = len(log[0]["x"]), len(log[0]["u"]), len(log[0]["d"])
    header = (["k"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]
              + [f"u_task{i}" for i in range(m)] + [f"d{i}" for i in range(p)] + ["policy"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in log:
            w.writerow([r["k"], *r["x"], *r["u"], *r["u_task"], *r["d"], r["policy"]])
