"""Adversarial reach-avoid actor-critic self-play, and the sparse-reward baselines.

The critic regresses onto the discounted reach-avoid target

    y = gamma * min{g', max{l', Q'(x', u', d')}} + (1 - gamma) * min{l', g'}

while the control actor ascends and the disturbance actor descends the critic, each
with an entropy bonus. Rollouts run ``n_envs`` environments in lockstep.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nnet
from .dp import discounted_target
from .envs import EnvSpec, MarginSpec, clamp, sample_box, sample_initial, step
from .filter import shield
from .nnet import AdamState, Mlp, StochasticPolicy, adam_step

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    total_steps: int = 200_000
    n_envs: int = 8
    updates_per_iter: int = 1
    batch_size: int = 256
    buffer_size: int = 1_000_000
    warmup_steps: int = 2_000
    critic_lr: float = 3e-4
    actor_lr: float = 3e-4
    polyak: float = 5e-3
    gamma_start: float = 0.85
    gamma_end: float = 0.999
    gamma_anneal_frac: float = 0.5
    alpha_start: float = 0.01
    alpha_end: float = 1e-4
    tau_ratio: int = 2
    leaderboard_size: int = 5
    eval_every: int = 10_000
    eval_episodes: int = 100
    episode_cap: int = 200
    reset_deploy_frac: float = 0.5
    terminate_on_target: bool = True  # episodes end at target capture
    actor_hidden: tuple = (256, 256, 256)
    critic_hidden: tuple = (128, 128, 128)
    objective: str = "reach_avoid"  # or "reward"
    players: str = "adversarial"  # or "single": disturbance drawn uniformly from D

    def __post_init__(self):
        self.actor_hidden = tuple(self.actor_hidden)
        self.critic_hidden = tuple(self.critic_hidden)
        if not (0.0 < self.gamma_start < 1.0 and 0.0 < self.gamma_end < 1.0):
            raise ValueError("discount factors must lie in (0, 1)")
        if self.tau_ratio < 1:
            raise ValueError("tau_ratio must be >= 1")
        if not 0.0 < self.polyak <= 1.0:
            raise ValueError("polyak rate must lie in (0, 1]")
        if self.objective not in ("reach_avoid", "reward"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.players not in ("adversarial", "single"):
            raise ValueError(f"unknown players mode {self.players!r}")

    def gamma(self, step: int) -> float:
        """Geometric interpolation of ``1 - gamma`` over the first part of training."""
        frac = min(1.0, step / max(1.0, self.gamma_anneal_frac * self.total_steps))
        return 1.0 - (1.0 - self.gamma_start) * ((1.0 - self.gamma_end) / (1.0 - self.gamma_start)) ** frac

    def alpha(self, step: int) -> float:
        frac = min(1.0, step / max(1, self.total_steps))
        return self.alpha_start * (self.alpha_end / self.alpha_start) ** frac

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["actor_hidden"] = list(self.actor_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**doc)


# -- replay buffer --------------------------------------------------------------------


class ReplayBuffer:
    """Ring buffer of transitions ``(x, u, d, x', l', g')``."""

    FIELDS = ("x", "u", "d", "x_next", "l_next", "g_next")

    def __init__(self, capacity: int, state_dim: int, ctrl_dim: int, dstb_dim: int):
        self.capacity = int(capacity)
        dims = {"x": state_dim, "u": ctrl_dim, "d": dstb_dim, "x_next": state_dim, "l_next": None, "g_next": None}
        self.data = {k: np.zeros((self.capacity,) if n is None else (self.capacity, n)) for k, n in dims.items()}
        self.size = 0
        self.ptr = 0

    def __len__(self) -> int:
        return self.size

    def add(self, x, u, d, x_next, l_next, g_next) -> None:
        batch = dict(zip(self.FIELDS, (x, u, d, x_next, l_next, g_next)))
        n = len(np.atleast_1d(l_next))
        idx = (self.ptr + np.arange(n)) % self.capacity
        for k, v in batch.items():
            self.data[k][idx] = v
        self.ptr = int((self.ptr + n) % self.capacity)
        self.size = int(min(self.size + n, self.capacity))

    def sample(self, n: int, rng: np.random.Generator) -> dict:
        idx = rng.integers(0, self.size, n)
        return {k: v[idx] for k, v in self.data.items()}

    def save(self, path) -> None:
        np.savez(path, size=self.size, ptr=self.ptr, **{k: v[: self.size] for k, v in self.data.items()})

    def load_into(self, path) -> None:
        with np.load(path) as z:
            self.size, self.ptr = int(z["size"]), int(z["ptr"])
            for k in self.FIELDS:
                self.data[k][: self.size] = z[k]


# -- losses ----------------------------------------------------------------------------


@dataclass
class Nets:
    ctrl: StochasticPolicy
    dstb: StochasticPolicy
    critic: Mlp
    critic_target: Mlp

    def copy(self) -> "Nets":
        return Nets(self.ctrl.copy(), self.dstb.copy(), self.critic.copy(), self.critic_target.copy())


def sparse_reward(l_next, g_next):
    return np.where(g_next < 0, -1.0, np.where(l_next >= 0, 1.0, 0.0))


def critic_target(batch: dict, gamma: float, target_critic: Mlp, ctrl_actor, dstb_actor,
                  rng: np.random.Generator, objective: str = "reach_avoid") -> np.ndarray:
    """Regression targets for a batch of transitions.

    ``ctrl_actor`` / ``dstb_actor`` may be stochastic policies (sampled) or plain
    callables (treated as deterministic, e.g. a frozen control scheme).
    """
    x_next = batch["x_next"]
    u_next = _act(ctrl_actor, x_next, rng)
    d_next = _act(dstb_actor, x_next, rng)
    q_next = target_critic.forward(np.concatenate([x_next, u_next, d_next], axis=-1))[..., 0]
    l_next, g_next = batch["l_next"], batch["g_next"]
    if objective == "reach_avoid":
        return discounted_target(g_next, l_next, q_next, gamma)
    return sparse_reward(l_next, g_next) + gamma * np.where(g_next < 0, 0.0, q_next)


def _act(policy, x, rng):
    if isinstance(policy, StochasticPolicy):
        return policy.sample(x, rng)[0]
    return np.asarray(policy(x), dtype=float)


def critic_loss_and_grads(batch: dict, y: np.ndarray, critic: Mlp):
    """Mean squared Bellman error and its parameter gradients."""
    inp = np.concatenate([batch["x"], batch["u"], batch["d"]], axis=-1)
    q, acts = critic.forward_cache(inp)
    err = q[:, 0] - y
    loss = float(np.mean(err**2))
    grads, _ = critic.backward(acts, (2.0 / len(err)) * err[:, None])
    return loss, grads


def critic_update(batch: dict, y: np.ndarray, critic: Mlp, opt: AdamState) -> float:
    """One Adam step on the mean squared Bellman error; returns the pre-step loss."""
    loss, grads = critic_loss_and_grads(batch, y, critic)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite critic loss (max |y| = {np.max(np.abs(y)):.3g})")
    adam_step(critic.params, grads, opt)
    return loss


def actor_loss_and_grads(batch: dict, actor: StochasticPolicy, critic: Mlp, alpha: float,
                         player: str, z: np.ndarray):
    """Loss and parameter gradients for one actor.

    The control player minimises ``E[-Q(x, u~, d) + alpha log pi(u~|x)]``; the
    disturbance player minimises ``E[Q(x, u, d~) + alpha log pi(d~|x)]``. The opposing
    action is taken from the buffer record.
    """
    x = batch["x"]
    a, logp, cache = actor.rsample(x, z)
    n = x.shape[-1]
    if player == "ctrl":
        inp = np.concatenate([x, a, batch["d"]], axis=-1)
        sign, lo, hi = -1.0, n, n + a.shape[-1]
    else:
        inp = np.concatenate([x, batch["u"], a], axis=-1)
        sign, lo, hi = 1.0, n + batch["u"].shape[-1], inp.shape[-1]
    q, acts = critic.forward_cache(inp)
    B = len(x)
    loss = float(np.mean(sign * q[:, 0] + alpha * logp))
    _, d_inp = critic.backward(acts, np.full_like(q, sign / B))
    grads = actor.backward(cache, d_inp[:, lo:hi], np.full(B, alpha / B))
    return loss, grads


def actor_update(batch, actor, critic, alpha, opt, player, rng) -> float:
    z = rng.standard_normal((len(batch["x"]), actor.act_dim))
    loss, grads = actor_loss_and_grads(batch, actor, critic, alpha, player, z)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite {player} actor loss")
    adam_step(actor.params, grads, opt)
    return loss


def ctrl_actor_update(batch, nets: Nets, alpha, opt, rng) -> float:
    return actor_update(batch, nets.ctrl, nets.critic, alpha, opt, "ctrl", rng)


def dstb_actor_update(batch, nets: Nets, alpha, opt, rng) -> float:
    return actor_update(batch, nets.dstb, nets.critic, alpha, opt, "dstb", rng)


# -- evaluation and leaderboard --------------------------------------------------------


def safe_rate(env: EnvSpec, margins: MarginSpec, ctrl: Callable, dstb: Callable, x0: np.ndarray,
              horizon: int) -> float:
    """Fraction of lockstep episodes that never enter the failure set."""
    x = np.array(x0, dtype=float)
    g_min = margins.failure_margin(x)
    for _ in range(horizon):
        alive = g_min >= 0
        if not alive.any():
            break
        u = clamp(np.asarray(ctrl(x), dtype=float), env.ctrl_bounds)
        d = clamp(np.asarray(dstb(x), dtype=float), env.dstb_bounds)
        x = np.where(alive[:, None], env.dynamics(x, u, d), x)
        g_min = np.minimum(g_min, margins.failure_margin(x))
    return float(np.mean(g_min >= 0))


@dataclass
class LeaderEntry:
    kind: str  # "ctrl" or "dstb"
    step: int
    score: float  # ctrl: worst safe rate; dstb: 1 - mean safe rate conceded
    policy: StochasticPolicy
    opponent: dict  # opponent label -> safe rate from the last cross-play
    eval_seed: int

    @property
    def label(self) -> str:
        return f"{self.kind}@{self.step}"


def uniform_disturbance(env: EnvSpec, rng: np.random.Generator) -> Callable:
    def policy(x):
        x = np.asarray(x)
        return sample_box(env.dstb_bounds, rng, int(np.prod(x.shape[:-1]) or 1)).reshape(x.shape[:-1] + (env.dstb_dim,))
    return policy


# -- checkpoint --------------------------------------------------------------------------


@dataclass
class PolicyCheckpoint:
    env_name: str
    env_constants: dict
    config: TrainConfig
    nets: Nets
    opts: dict  # name -> AdamState
    step: int = 0
    updates: int = 0
    leaderboard: list = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)
    runner: dict = field(default_factory=dict)  # rollout state for bit-exact resumption
    metrics: list = field(default_factory=list)
    buffer: ReplayBuffer | None = None
    seed: int = 0
    fixed_ctrl: bool = False

    def best(self, kind: str) -> StochasticPolicy:
        """Top leaderboard policy of a kind, falling back to the live network."""
        entries = [e for e in self.leaderboard if e.kind == kind]
        if entries:
            return max(entries, key=lambda e: (e.score, e.step)).policy
        return self.nets.ctrl if kind == "ctrl" else self.nets.dstb

    def save(self, directory) -> Path:
        out = Path(directory)
        (out / "leaderboard").mkdir(parents=True, exist_ok=True)
        nnet.save_json(self.nets.ctrl, out / "ctrl_actor.json")
        nnet.save_json(self.nets.dstb, out / "dstb_actor.json")
        nnet.save_json(self.nets.critic, out / "critic.json")
        nnet.save_json(self.nets.critic_target, out / "critic_target.json")
        (out / "optim.json").write_text(json.dumps({k: v.to_dict() for k, v in self.opts.items()}))
        index = []
        for i, e in enumerate(self.leaderboard):
            name = f"{e.kind}_{i}.json"
            nnet.save_json(e.policy, out / "leaderboard" / name)
            index.append({"file": name, "kind": e.kind, "step": e.step, "score": e.score,
                          "opponent": e.opponent, "eval_seed": e.eval_seed})
        (out / "leaderboard" / "index.json").write_text(json.dumps(index, indent=1))
        runner = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.runner.items()}
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "env": self.env_name,
            "env_constants": self.env_constants,
            "config": self.config.to_dict(),
            "seed": self.seed,
            "step": self.step,
            "updates": self.updates,
            "fixed_ctrl": self.fixed_ctrl,
            "rng_state": self.rng_state,
            "runner": runner,
        }
        (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        write_metrics(self.metrics, out / "metrics.csv")
        if self.buffer is not None:
            self.buffer.save(out / "buffer.npz")
        return out

    @classmethod
    def load(cls, directory, with_buffer: bool = True) -> "PolicyCheckpoint":
        src = Path(directory)
        if not (src / "meta.json").exists():
            raise FileNotFoundError(f"no checkpoint at {src}")
        meta = json.loads((src / "meta.json").read_text())
        if meta["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
        nets = Nets(nnet.load_policy(src / "ctrl_actor.json"), nnet.load_policy(src / "dstb_actor.json"),
                    nnet.load_mlp(src / "critic.json"), nnet.load_mlp(src / "critic_target.json"))
        params = {"critic": nets.critic.params, "ctrl": nets.ctrl.params, "dstb": nets.dstb.params}
        opts = {k: AdamState.from_dict(v, params[k]) for k, v in json.loads((src / "optim.json").read_text()).items()}
        board = []
        for item in json.loads((src / "leaderboard" / "index.json").read_text()):
            board.append(LeaderEntry(item["kind"], item["step"], item["score"],
                                     nnet.load_policy(src / "leaderboard" / item["file"]),
                                     item["opponent"], item["eval_seed"]))
        cfg = TrainConfig.from_dict(meta["config"])
        runner = dict(meta["runner"])
        for k in ("x", "ep_len", "adv"):
            if k in runner:
                runner[k] = np.array(runner[k])
        buf = None
        if with_buffer and (src / "buffer.npz").exists():
            x_dim = nets.ctrl.trunk.sizes[0]
            buf = ReplayBuffer(cfg.buffer_size, x_dim, nets.ctrl.act_dim, nets.dstb.act_dim)
            buf.load_into(src / "buffer.npz")
        return cls(meta["env"], meta["env_constants"], cfg, nets, opts, meta["step"], meta["updates"], board,
                   meta["rng_state"], runner, read_metrics(src / "metrics.csv"), buf, meta["seed"],
                   meta.get("fixed_ctrl", False))


METRIC_FIELDS = ("step", "updates", "gamma", "alpha", "critic_loss", "ctrl_loss", "dstb_loss",
                 "eval_safe_rate", "episodes", "cumulative_violations")


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, METRIC_FIELDS)
        w.writeheader()
        w.writerows(rows)


def read_metrics(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k in ("step", "updates", "episodes", "cumulative_violations") else float(v))
                    for k, v in r.items()})
    return out


def reset_states(env: EnvSpec, cfg: TrainConfig, n: int, rng) -> np.ndarray:
    """Episode starts: a ``reset_deploy_frac`` share from the deployment box, the rest from the state box."""
    from_deploy = rng.random(n) < cfg.reset_deploy_frac
    return np.where(from_deploy[:, None], sample_initial(env, rng, n), sample_box(env.state_box, rng, n))


def eval_states(env: EnvSpec, cfg: TrainConfig, seed: int) -> np.ndarray:
    """The fixed initial states used for leaderboard cross-play at ``seed``."""
    return reset_states(env, cfg, cfg.eval_episodes, np.random.default_rng(seed))


# -- trainer ------------------------------------------------------------------------------


class Trainer:
    """Owns every mutable piece of a training run; :meth:`run` advances it."""

    def __init__(self, env: EnvSpec, margins: MarginSpec, cfg: TrainConfig, seed: int = 0,
                 ctrl_scheme: Callable | None = None, checkpoint: PolicyCheckpoint | None = None):
        self.env, self.margins, self.cfg = env, margins, cfg
        self.ctrl_scheme = ctrl_scheme
        if checkpoint is None:
            checkpoint = self._fresh(seed)
        elif checkpoint.buffer is None:
            raise ValueError("resuming needs the checkpoint's replay buffer")
        self.ck = checkpoint
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = checkpoint.rng_state["main"]
        self.reset_rng = np.random.default_rng()
        self.reset_rng.bit_generator.state = checkpoint.rng_state["reset"]
        r = checkpoint.runner
        self.x, self.ep_len, self.adv = r["x"].astype(float), r["ep_len"].astype(int), r["adv"].astype(int)
        self.episodes, self.violations = int(r["episodes"]), int(r["violations"])
        self.losses = dict(r.get("losses", {"critic": 0.0, "ctrl": 0.0, "dstb": 0.0}))

    def _fresh(self, seed: int) -> PolicyCheckpoint:
        env, cfg = self.env, self.cfg
        rng = np.random.default_rng(seed)
        ctrl = StochasticPolicy.create(env.state_dim, cfg.actor_hidden, env.ctrl_bounds, rng)
        dstb = StochasticPolicy.create(env.state_dim, cfg.actor_hidden, env.dstb_bounds, rng)
        critic = Mlp([env.state_dim + env.ctrl_dim + env.dstb_dim, *cfg.critic_hidden, 1], rng=rng)
        nets = Nets(ctrl, dstb, critic, critic.copy())
        opts = {"critic": AdamState.for_params(critic.params, lr=cfg.critic_lr),
                "ctrl": AdamState.for_params(ctrl.params, lr=cfg.actor_lr),
                "dstb": AdamState.for_params(dstb.params, lr=cfg.actor_lr)}
        reset_rng = np.random.default_rng([seed, 1])
        x = self._reset_states(cfg.n_envs, reset_rng)
        runner = {"x": x, "ep_len": np.zeros(cfg.n_envs, dtype=int), "adv": np.full(cfg.n_envs, -1),
                  "episodes": 0, "violations": 0}
        buf = ReplayBuffer(cfg.buffer_size, env.state_dim, env.ctrl_dim, env.dstb_dim)
        return PolicyCheckpoint(env.name, env.constants, cfg, nets, opts, 0, 0, [],
                                {"main": rng.bit_generator.state, "reset": reset_rng.bit_generator.state},
                                runner, [], buf, seed, self.ctrl_scheme is not None)

    # rollout helpers

    def _reset_states(self, n: int, rng) -> np.ndarray:
        return reset_states(self.env, self.cfg, n, rng)

    def _adversaries(self) -> list:
        return [e for e in self.ck.leaderboard if e.kind == "dstb"]

    def _ctrl_actions(self, x):
        if self.ctrl_scheme is not None:
            return np.asarray(self.ctrl_scheme(x), dtype=float)
        if self.ck.step < self.cfg.warmup_steps:
            return sample_box(self.env.ctrl_bounds, self.rng, len(x))
        return self.ck.nets.ctrl.sample(x, self.rng)[0]

    def _dstb_actions(self, x):
        env = self.env
        if self.cfg.players == "single" or self.ck.step < self.cfg.warmup_steps:
            return sample_box(env.dstb_bounds, self.rng, len(x))
        d = self.ck.nets.dstb.sample(x, self.rng)[0]
        advs = self._adversaries()
        for j, entry in enumerate(advs):
            mask = self.adv == j
            if mask.any():
                d[mask] = entry.policy.sample(x[mask], self.rng)[0]
        return d

    def _collect(self) -> None:
        env, m, cfg = self.env, self.margins, self.cfg
        x = self.x
        u = self._ctrl_actions(x)
        d = self._dstb_actions(x)
        x_next = step(env, x, u, d)
        g_next, l_next = m.failure_margin(x_next), m.target_margin(x_next)
        self.ck.buffer.add(x, u, d, x_next, l_next, g_next)
        self.ep_len += 1
        failed = g_next < 0
        done = failed | (self.ep_len >= cfg.episode_cap)
        if cfg.terminate_on_target:
            done |= l_next >= 0
        self.violations += int(failed.sum())
        self.episodes += int(done.sum())
        self.x = x_next
        if done.any():
            n = int(done.sum())
            self.x[done] = self._reset_states(n, self.reset_rng)
            self.ep_len[done] = 0
            n_adv = len(self._adversaries())
            # each new episode faces the live adversary (-1) or a leaderboard snapshot
            self.adv[done] = self.reset_rng.integers(-1, n_adv, n) if n_adv else -1
        self.ck.step += cfg.n_envs

    def _update(self) -> None:
        cfg, nets, ck = self.cfg, self.ck.nets, self.ck
        batch = ck.buffer.sample(cfg.batch_size, self.rng)
        gamma, alpha = cfg.gamma(ck.step), cfg.alpha(ck.step)
        ctrl_next = self.ctrl_scheme if self.ctrl_scheme is not None else nets.ctrl
        dstb_next = nets.dstb if cfg.players == "adversarial" else uniform_disturbance(self.env, self.rng)
        y = critic_target(batch, gamma, nets.critic_target, ctrl_next, dstb_next, self.rng, cfg.objective)
        self.losses["critic"] = critic_update(batch, y, nets.critic, ck.opts["critic"])
        nnet.polyak(nets.critic_target, nets.critic, cfg.polyak)
        if cfg.players == "adversarial":
            self.losses["dstb"] = dstb_actor_update(batch, nets, alpha, ck.opts["dstb"], self.rng)
        if self.ctrl_scheme is None and ck.updates % cfg.tau_ratio == 0:
            self.losses["ctrl"] = ctrl_actor_update(batch, nets, alpha, ck.opts["ctrl"], self.rng)
        ck.updates += 1

    # evaluation

    def eval_states(self, seed: int) -> np.ndarray:
        return eval_states(self.env, self.cfg, seed)

    @property
    def eval_seed(self) -> int:
        return int(self.ck.seed) * 1_000_003 + 17

    def _evaluate(self) -> float:
        """Cross-play the live snapshots against the leaderboard and re-rank it.

        Control entries score their worst safe rate over the adversaries on the board;
        disturbance entries score one minus the mean safe rate they concede.
        """
        cfg, ck, env, m = self.cfg, self.ck, self.env, self.margins
        x0 = self.eval_states(self.eval_seed)
        board = ck.leaderboard
        if self.ctrl_scheme is None:
            board.append(LeaderEntry("ctrl", ck.step, 0.0, ck.nets.ctrl.copy(), {}, self.eval_seed))
        if cfg.players == "adversarial":
            board.append(LeaderEntry("dstb", ck.step, 0.0, ck.nets.dstb.copy(), {}, self.eval_seed))
        ctrls = [e for e in board if e.kind == "ctrl"]
        dstbs = [e for e in board if e.kind == "dstb"]
        ctrl_fns = [(e.label, shield(e.policy.mean_action, m)) for e in ctrls]
        if self.ctrl_scheme is not None:
            ctrl_fns = [("scheme", self.ctrl_scheme)]
        if cfg.players == "single":
            dstb_fns = [("uniform", uniform_disturbance(env, np.random.default_rng(self.eval_seed)))]
        else:
            dstb_fns = [(e.label, e.policy.mean_action) for e in dstbs]
        S = np.empty((len(ctrl_fns), len(dstb_fns)))
        for i, (c_label, c_fn) in enumerate(ctrl_fns):
            for j, (d_label, d_fn) in enumerate(dstb_fns):
                if d_label == "uniform":
                    d_fn = uniform_disturbance(env, np.random.default_rng(self.eval_seed))
                S[i, j] = safe_rate(env, m, c_fn, d_fn, x0, cfg.episode_cap)
        for i, e in enumerate(ctrls):
            e.score = float(S[i].min())
            e.opponent = {d_label: float(S[i, j]) for j, (d_label, _) in enumerate(dstb_fns)}
        for j, e in enumerate(dstbs):
            e.score = float(1.0 - S[:, j].mean())
            e.opponent = {c_label: float(S[i, j]) for i, (c_label, _) in enumerate(ctrl_fns)}
        for kind in ("ctrl", "dstb"):
            entries = sorted((e for e in board if e.kind == kind), key=lambda e: (e.score, e.step), reverse=True)
            for e in entries[cfg.leaderboard_size:]:
                board.remove(e)
        # safe rate of the live controller against the strongest adversary on the board
        live_row = S[-1] if self.ctrl_scheme is None else S[0]
        return float(live_row.min())

    def _record(self, rate: float) -> None:
        ck = self.ck
        ck.metrics.append({
            "step": ck.step, "updates": ck.updates, "gamma": self.cfg.gamma(ck.step),
            "alpha": self.cfg.alpha(ck.step), "critic_loss": self.losses["critic"],
            "ctrl_loss": self.losses["ctrl"], "dstb_loss": self.losses["dstb"],
            "eval_safe_rate": rate, "episodes": self.episodes, "cumulative_violations": self.violations,
        })

    def run(self, until: int | None = None) -> PolicyCheckpoint:
        cfg, ck = self.cfg, self.ck
        until = cfg.total_steps if until is None else min(until, cfg.total_steps)
        while ck.step < until:
            before = ck.step
            self._collect()
            if ck.step >= cfg.warmup_steps and len(ck.buffer) >= cfg.batch_size:
                for _ in range(cfg.updates_per_iter):
                    self._update()
            if cfg.eval_every and ck.step // cfg.eval_every > before // cfg.eval_every:
                rate = self._evaluate()
                self._record(rate)
                log.info("step %d: eval safe rate %.3f, violations %d", ck.step, rate, self.violations)
        self._sync()
        return ck

    def _sync(self) -> None:
        ck = self.ck
        ck.rng_state = {"main": self.rng.bit_generator.state, "reset": self.reset_rng.bit_generator.state}
        ck.runner = {"x": self.x.copy(), "ep_len": self.ep_len.copy(), "adv": self.adv.copy(),
                     "episodes": self.episodes, "violations": self.violations, "losses": dict(self.losses)}


def train(env: EnvSpec, margins: MarginSpec, cfg: TrainConfig, seed: int = 0,
          resume: PolicyCheckpoint | None = None) -> PolicyCheckpoint:
    """Joint self-play of critic, control actor and disturbance actor."""
    return Trainer(env, margins, cfg, seed, checkpoint=resume).run()


def train_reward_baseline(env: EnvSpec, margins: MarginSpec, cfg: TrainConfig, mode: str = "adversarial",
                          seed: int = 0) -> PolicyCheckpoint:
    """Same machinery with a sparse +1 (target) / -1 (failure) reward instead of the game target."""
    cfg = dataclasses.replace(cfg, objective="reward", players="single" if mode == "single" else "adversarial")
    return Trainer(env, margins, cfg, seed).run()


def discounted_return(rewards, gamma: float) -> float:
    rewards = np.asarray(rewards, dtype=float)
    return float(np.sum(rewards * gamma ** np.arange(len(rewards))))
