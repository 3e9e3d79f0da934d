"""Stress tests for frozen control schemes.

A BUST adversary is a disturbance actor trained from scratch against one frozen
closed loop. Random baselines draw disturbances uniformly from the box or from its
corners. ``evaluate_matrix`` plays every scheme against every adversary from one
shared set of initial states.
"""

from __future__ import annotations

import csv
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import filter as flt
from .envs import EnvSpec, MarginSpec, sample_initial
from .isaacs import PolicyCheckpoint, TrainConfig, Trainer, safe_rate

log = logging.getLogger(__name__)

Policy = Callable[[np.ndarray], np.ndarray]

SCHEME_LABELS = ("ctrl_actor", "task", "gameplay_filter", "critic_filter")


@dataclass(frozen=True)
class ControlScheme:
    """A frozen, stateless, batched closed-loop action source."""

    label: str
    policy: Policy

    def __call__(self, x):
        return self.policy(x)


def standard_schemes(env: EnvSpec, margins: MarginSpec, pols: flt.GameplayPolicies, task: Policy,
                     cfg: flt.FilterConfig, epsilon: float = 0.0) -> list[ControlScheme]:
    """The four rows of the stress-test matrix.

    The gameplay filter runs the per-step switching rule (latency 1) so that the
    closed loop stays a pure function of the state.
    """
    step_cfg = flt.FilterConfig(cfg.horizon, 1, cfg.criterion, cfg.critic_threshold)
    return [
        ControlScheme("ctrl_actor", pols.ctrl),
        ControlScheme("task", task),
        ControlScheme("gameplay_filter", flt.gameplay_scheme(task, step_cfg, pols, env, margins)),
        ControlScheme("critic_filter", flt.critic_scheme(task, epsilon, pols, margins)),
    ]


def random_disturbance(bounds, mode: str, rng: np.random.Generator) -> Policy:
    """Uniform draws from the box ``bounds`` or uniform draws from its corner set."""
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    if mode not in ("uniform", "extreme"):
        raise ValueError(f"unknown random disturbance mode {mode!r}")
    corners = np.array(list(itertools.product(*bounds)))

    def policy(x):
        n = len(np.atleast_2d(x))
        if mode == "uniform":
            return rng.uniform(bounds[:, 0], bounds[:, 1], (n, len(bounds)))
        return corners[rng.integers(0, len(corners), n)]

    return policy


def train_bust_adversary(env: EnvSpec, margins: MarginSpec, scheme: ControlScheme, cfg: TrainConfig,
                         seed: int = 0) -> tuple[Policy, PolicyCheckpoint]:
    """Train a disturbance actor and a fresh critic against a frozen scheme.

    Returns the deterministic (mean-action) policy of the best adversary on the
    leaderboard, or of the untrained actor when no evaluation has happened yet.
    """
    ck = Trainer(env, margins, cfg, seed, ctrl_scheme=scheme.policy).run()
    return ck.best("dstb").mean_action, ck


@dataclass
class SafeRateMatrix:
    rows: list  # scheme labels
    cols: list  # adversary labels
    values: np.ndarray  # (rows, cols) safe rates
    n_episodes: int
    episode_len: int
    seed: int
    notes: list = field(default_factory=list)

    def cell(self, row: str, col: str) -> float:
        return float(self.values[self.rows.index(row), self.cols.index(col)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scheme", *self.cols])
            for label, row in zip(self.rows, self.values):
                w.writerow([label, *(repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path, n_episodes: int = 0, episode_len: int = 0, seed: int = 0) -> "SafeRateMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls([r[0] for r in rows[1:]], rows[0][1:], np.array([[float(v) for v in r[1:]] for r in rows[1:]]),
                   n_episodes, episode_len, seed)

    def attack_violations(self) -> list[str]:
        """Schemes whose own BUST adversary is not the strongest one against them."""
        out = []
        for i, label in enumerate(self.rows):
            own = f"bust:{label}"
            if own in self.cols and self.values[i, self.cols.index(own)] > self.values[i].min():
                out.append(label)
        return out


def shared_initial_states(env: EnvSpec, n: int, seed: int) -> np.ndarray:
    return sample_initial(env, np.random.default_rng([seed, 0]), n)


def evaluate_matrix(env: EnvSpec, margins: MarginSpec, schemes: list[ControlScheme], adversaries: list,
                    n_episodes: int, episode_len: int = 300, seed: int = 0, jobs: int = 1,
                    x0: np.ndarray | None = None) -> SafeRateMatrix:
    """Safe rate of every scheme against every adversary on one set of initial states.

    ``adversaries`` holds ``(label, factory)`` pairs; ``factory(rng)`` returns the
    disturbance policy for one cell, with ``rng`` derived from ``seed`` and the cell index.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    x0 = shared_initial_states(env, n_episodes, seed) if x0 is None else np.asarray(x0, dtype=float)

    def cell(ij):
        i, j = ij
        dstb = adversaries[j][1](np.random.default_rng([seed, 1, i, j]))
        return safe_rate(env, margins, schemes[i].policy, dstb, x0, episode_len)

    cells = list(itertools.product(range(len(schemes)), range(len(adversaries))))
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            rates = list(pool.map(cell, cells))
    else:
        rates = [cell(c) for c in cells]
    values = np.array(rates).reshape(len(schemes), len(adversaries))
    mat = SafeRateMatrix([s.label for s in schemes], [a[0] for a in adversaries], values, len(x0),
                         episode_len, seed)
    for label in mat.attack_violations():
        note = f"{label}: own BUST adversary is not the strongest"
        mat.notes.append(note)
        log.warning(note)
    return mat


def random_adversaries(env: EnvSpec) -> list:
    return [("rnd", lambda rng: random_disturbance(env.dstb_bounds, "uniform", rng)),
            ("rnd+", lambda rng: random_disturbance(env.dstb_bounds, "extreme", rng))]
