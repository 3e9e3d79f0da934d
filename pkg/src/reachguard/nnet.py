"""Small tanh MLPs with hand-written backprop, Adam, and squashed-Gaussian policies."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
NET_FORMAT_VERSION = 1


class Mlp:
    """Feedforward net: tanh hidden layers, linear output. Weights are ``(fan_in, fan_out)``."""

    def __init__(self, sizes, params=None, rng: np.random.Generator | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            params = []
            for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
                bound = 1.0 / math.sqrt(fan_in)
                params.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
                params.append(rng.uniform(-bound, bound, fan_out))
        self.params = [np.array(p, dtype=float) for p in params]
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if self.params[2 * i].shape != (fan_in, fan_out) or self.params[2 * i + 1].shape != (fan_out,):
                raise ValueError(f"layer {i}: parameter shapes do not match sizes {self.sizes}")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input has size {x.shape[-1]}, expected {self.sizes[0]}")
        return x

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        h = self._check(x)
        for i in range(self.n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < self.n_layers - 1:
                h = np.tanh(h)
        return h

    def forward_cache(self, x):
        h = self._check(x)
        acts = [h]
        for i in range(self.n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < self.n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, acts, upstream):
        """Gradients of ``sum(upstream * output)`` w.r.t. parameters and input."""
        delta = np.asarray(upstream, dtype=float)
        if delta.shape != acts[-1].shape:
            raise ValueError(f"upstream shape {delta.shape} != output shape {acts[-1].shape}")
        grads = [None] * len(self.params)
        for i in range(self.n_layers - 1, -1, -1):
            a_in = acts[i]
            if a_in.ndim == 1:
                grads[2 * i] = np.outer(a_in, delta)
                grads[2 * i + 1] = delta.copy()
            else:
                grads[2 * i] = a_in.T @ delta
                grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ self.params[2 * i].T
            if i > 0:
                delta = delta * (1.0 - acts[i] ** 2)
        return grads, delta

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, [p.copy() for p in self.params])

    def to_dict(self) -> dict:
        return {
            "format_version": NET_FORMAT_VERSION,
            "kind": "mlp",
            "sizes": list(self.sizes),
            "activation": "tanh",
            "params": [{"shape": list(p.shape), "data": p.ravel().tolist()} for p in self.params],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Mlp":
        if doc.get("format_version") != NET_FORMAT_VERSION:
            raise ValueError(f"unsupported network format {doc.get('format_version')!r}")
        params = [np.array(p["data"], dtype=float).reshape(p["shape"]) for p in doc["params"]]
        return cls(doc["sizes"], params)


def forward(net: Mlp, x):
    return net.forward(x)


def grad(net: Mlp, x, upstream):
    _, acts = net.forward_cache(x)
    return net.backward(acts, upstream)


def polyak(target: Mlp, source: Mlp, rate: float) -> None:
    for pt, ps in zip(target.params, source.params):
        pt *= 1.0 - rate
        pt += rate * ps


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw)

    def to_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step,
                "m": [a.ravel().tolist() for a in self.m], "v": [a.ravel().tolist() for a in self.v]}

    @classmethod
    def from_dict(cls, doc: dict, params) -> "AdamState":
        m = [np.array(a, dtype=float).reshape(p.shape) for a, p in zip(doc["m"], params)]
        v = [np.array(a, dtype=float).reshape(p.shape) for a, p in zip(doc["v"], params)]
        return cls(doc["lr"], doc["beta1"], doc["beta2"], doc["eps"], doc["step"], m, v)


def adam_step(params, grads, state: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter tensor {i}")
        if g.shape != params[i].shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {params[i].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- stochastic policies ----------------------------------------------------------


def _log1m_tanh_sq(pre):
    # log(1 - tanh(pre)^2), stable for large |pre|
    return 2.0 * (math.log(2.0) - pre - np.logaddexp(0.0, -2.0 * pre))


class StochasticPolicy:
    """Tanh-squashed Gaussian policy rescaled to a box of action bounds."""

    def __init__(self, trunk: Mlp, bounds):
        self.trunk = trunk
        self.bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
        self.act_dim = len(self.bounds)
        if trunk.sizes[-1] != 2 * self.act_dim:
            raise ValueError("trunk must emit a mean and a log-std per action dimension")
        self.scale = (self.bounds[:, 1] - self.bounds[:, 0]) / 2.0
        self.offset = (self.bounds[:, 1] + self.bounds[:, 0]) / 2.0

    @classmethod
    def create(cls, obs_dim: int, hidden, bounds, rng) -> "StochasticPolicy":
        bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
        return cls(Mlp([obs_dim, *hidden, 2 * len(bounds)], rng=rng), bounds)

    def distribution(self, x):
        out = self.trunk.forward(x)
        mu, raw = out[..., : self.act_dim], out[..., self.act_dim:]
        return mu, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)

    def mean_action(self, x):
        mu, _ = self.distribution(x)
        return self.offset + self.scale * np.tanh(mu)

    act = mean_action
    __call__ = mean_action

    def sample(self, x, rng: np.random.Generator):
        """Draw ``(action, log_prob)``; ``log_prob`` includes the squash-and-scale correction."""
        x = np.asarray(x, dtype=float)
        z = rng.standard_normal(x.shape[:-1] + (self.act_dim,))
        a, logp, _ = self.rsample(x, z)
        return a, logp

    def rsample(self, x, z):
        """Reparameterized sample for fixed noise ``z``; returns a cache for :meth:`backward`."""
        out, acts = self.trunk.forward_cache(x)
        mu, raw = out[..., : self.act_dim], out[..., self.act_dim:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        std = np.exp(log_std)
        pre = mu + std * z
        t = np.tanh(pre)
        a = self.offset + self.scale * t
        logp = np.sum(-0.5 * z**2 - 0.5 * math.log(2 * math.pi) - log_std
                      - np.log(self.scale) - _log1m_tanh_sq(pre), axis=-1)
        cache = (acts, raw, std, z, t)
        return a, logp, cache

    def backward(self, cache, d_action, d_logp):
        """Parameter gradients of ``sum(d_action * a) + sum(d_logp * logp)``."""
        acts, raw, std, z, t = cache
        d_logp = np.asarray(d_logp, dtype=float)[..., None]
        d_pre = d_action * self.scale * (1.0 - t**2) + d_logp * 2.0 * t
        d_log_std = (d_pre * std * z - d_logp) * ((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX))
        grads, _ = self.trunk.backward(acts, np.concatenate([d_pre, d_log_std], axis=-1))
        return grads

    @property
    def params(self):
        return self.trunk.params

    def copy(self) -> "StochasticPolicy":
        return StochasticPolicy(self.trunk.copy(), self.bounds.copy())

    def to_dict(self) -> dict:
        return {"format_version": NET_FORMAT_VERSION, "kind": "squashed_gaussian",
                "bounds": self.bounds.tolist(), "trunk": self.trunk.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "StochasticPolicy":
        return cls(Mlp.from_dict(doc["trunk"]), np.array(doc["bounds"], dtype=float))


def save_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj.to_dict(), fh)


def load_policy(path) -> StochasticPolicy:
    with open(path) as fh:
        return StochasticPolicy.from_dict(json.load(fh))


def load_mlp(path) -> Mlp:
    with open(path) as fh:
        return Mlp.from_dict(json.load(fh))
