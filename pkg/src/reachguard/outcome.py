"""Closed-loop rollouts and the reach-avoid game outcome."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .envs import EnvSpec, MarginSpec, clamp, step

Policy = Callable[[np.ndarray], np.ndarray]


class Verdict(str, enum.Enum):
    WIN = "Win"
    LOSS = "Loss"
    TIMEOUT = "Timeout"


@dataclass(frozen=True)
class GameResult:
    outcome_value: float
    verdict: Verdict
    first_target_step: int | None = None
    first_failure_step: int | None = None


def reach_avoid_outcome(g_seq, l_seq, start: int = 0) -> GameResult:
    """Reach-avoid outcome ``max_tau min(l[tau], min_{s<=tau} g[s])`` over ``tau >= start``.

    One pass with a running minimum of ``g``. Indices before ``start`` are ignored
    entirely, which gives the monitor convention that quantifies from step 1.
    """
    g_seq = np.asarray(g_seq, dtype=float)
    l_seq = np.asarray(l_seq, dtype=float)
    if g_seq.shape != l_seq.shape or g_seq.ndim != 1:
        raise ValueError("margin sequences must be 1-D and of equal length")
    if len(g_seq) <= start:
        raise ValueError("empty margin sequence")

    best = -np.inf
    run_min = np.inf
    first_target = first_failure = None
    verdict = None
    for k in range(start, len(g_seq)):
        run_min = min(run_min, g_seq[k])
        best = max(best, min(l_seq[k], run_min))
        if first_failure is None and g_seq[k] < 0:
            first_failure = k
        if first_target is None and l_seq[k] >= 0:
            first_target = k
        if verdict is None:
            if run_min < 0:
                verdict = Verdict.LOSS
            elif l_seq[k] >= 0:
                verdict = Verdict.WIN
    return GameResult(float(best), verdict or Verdict.TIMEOUT, first_target, first_failure)


@dataclass
class Trajectory:
    states: np.ndarray  # (N+1, n)
    controls: np.ndarray  # (N, m_u)
    disturbances: np.ndarray  # (N, m_d)
    g_seq: np.ndarray  # (N+1,)
    l_seq: np.ndarray  # (N+1,)

    @property
    def horizon(self) -> int:
        return len(self.controls)

    def result(self, start: int = 0) -> GameResult:
        return reach_avoid_outcome(self.g_seq, self.l_seq, start)

    def records(self) -> Iterable[list]:
        """One row per stored state: k, x..., u..., d..., g, l (actions blank at the end)."""
        n_u, n_d = self.controls.shape[1], self.disturbances.shape[1]
        for k, x in enumerate(self.states):
            if k < self.horizon:
                u, d = list(self.controls[k]), list(self.disturbances[k])
            else:
                u, d = [""] * n_u, [""] * n_d
            yield [k, *x, *u, *d, self.g_seq[k], self.l_seq[k]]

    def header(self) -> list[str]:
        n, n_u, n_d = self.states.shape[1], self.controls.shape[1], self.disturbances.shape[1]
        return (["k"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(n_u)]
                + [f"d{i}" for i in range(n_d)] + ["g", "l"])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            w.writerows(self.records())


def _checked(action, name: str, k: int) -> np.ndarray:
    action = np.asarray(action, dtype=float)
    if not np.all(np.isfinite(action)):
        raise ValueError(f"{name} policy returned a non-finite action at step {k}")
    return action


def rollout(env: EnvSpec, margins: MarginSpec, x0, ctrl: Policy, dstb: Policy, horizon: int,
            terminate: str = "reach_avoid") -> Trajectory:
    """Simulate the closed loop for up to ``horizon`` steps.

    ``terminate`` is ``"reach_avoid"`` (stop on failure or target entry), ``"avoid"``
    (stop on failure only) or ``"none"``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x = np.asarray(x0, dtype=float)
    states, us, ds = [x], [], []
    gs, ls = [float(margins.failure_margin(x))], [float(margins.target_margin(x))]
    for k in range(horizon):
        if terminate != "none" and (gs[-1] < 0 or (terminate == "reach_avoid" and ls[-1] >= 0)):
            break
        u = clamp(_checked(ctrl(x), "control", k), env.ctrl_bounds)
        d = clamp(_checked(dstb(x), "disturbance", k), env.dstb_bounds)
        x = step(env, x, u, d)
        states.append(x)
        us.append(u)
        ds.append(d)
        gs.append(float(margins.failure_margin(x)))
        ls.append(float(margins.target_margin(x)))
    return Trajectory(np.array(states), np.array(us).reshape(-1, env.ctrl_dim),
                      np.array(ds).reshape(-1, env.dstb_dim), np.array(gs), np.array(ls))


def simulate_batch(env: EnvSpec, margins: MarginSpec, x0, ctrl: Policy, dstb: Policy,
                   horizon: int) -> dict:
    """Run many episodes in lockstep for ``horizon`` steps (no early termination).

    Returns the state history plus per-episode failure flags; policies receive the
    whole batch of states.
    """
    x = np.asarray(x0, dtype=float)
    states = [x]
    g_min = margins.failure_margin(x)
    for _ in range(horizon):
        u = clamp(np.asarray(ctrl(x), dtype=float), env.ctrl_bounds)
        d = clamp(np.asarray(dstb(x), dtype=float), env.dstb_bounds)
        x = env.dynamics(x, u, d)
        states.append(x)
        g_min = np.minimum(g_min, margins.failure_margin(x))
    return {"states": np.stack(states), "min_g": g_min, "safe": g_min >= 0}
