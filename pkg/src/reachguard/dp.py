"""Tabular reach-avoid value iteration on regular state grids.

Two backup modes share one successor table:

* ``finite``: ``V_k(x) = max_u min_d min{g(x), max{l(x), V_{k+1}(f(x,u,d))}}``
  with terminal layer ``V_H = min{l, g}``.
* ``discounted``: the time-discounted target used by the learned critic, with the
  margins read at the successor state.

Off-grid successors are evaluated by multilinear interpolation with componentwise
clamping to the grid box; successors further than one cell outside the box are
counted and reported.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import EnvSpec, MarginSpec, clamp

MAGIC = b"RGVG"
FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class StateGrid:
    lower: np.ndarray
    upper: np.ndarray
    points: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "points", tuple(int(p) for p in self.points))
        if any(p < 2 for p in self.points):
            raise ValueError("need at least 2 points per dimension")
        if not (len(self.lower) == len(self.upper) == len(self.points)):
            raise ValueError("bounds and point counts disagree in dimension")
        if np.any(self.upper <= self.lower):
            raise ValueError("grid upper bound must exceed lower bound")

    @classmethod
    def from_box(cls, box, points) -> "StateGrid":
        box = np.asarray(box, dtype=float)
        if np.isscalar(points):
            points = (int(points),) * len(box)
        return cls(box[:, 0], box[:, 1], tuple(points))

    @property
    def ndim(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points

    @property
    def size(self) -> int:
        return int(np.prod(self.points))

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / (np.array(self.points) - 1)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.lower, self.upper, self.points)]

    def nodes(self) -> np.ndarray:
        """All lattice nodes in row-major order, shape ``(size, ndim)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True, eq=False)
class ActionLattice:
    controls: np.ndarray  # (K_u, ctrl_dim)
    disturbances: np.ndarray  # (K_d, dstb_dim)

    @classmethod
    def uniform(cls, env: EnvSpec, ctrl_points: int = 5, dstb_points: int = 5) -> "ActionLattice":
        return cls(_box_lattice(env.ctrl_bounds, ctrl_points), _box_lattice(env.dstb_bounds, dstb_points))


def _box_lattice(bounds: np.ndarray, points: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, points) if hi > lo else np.array([lo]) for lo, hi in bounds]
    return np.array(list(itertools.product(*axes)), dtype=float)


@dataclass(eq=False)
class ValueGrid:
    grid: StateGrid
    values: np.ndarray  # (layers, *grid.shape); finite mode layer k holds V_k
    ctrl_policy: np.ndarray  # (layers - 1 or 1, *grid.shape) indices into lattice.controls
    dstb_policy: np.ndarray
    lattice: ActionLattice
    mode: str = "finite"
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.values.shape[0] - 1 if self.mode == "finite" else 0

    def layer(self, k: int = 0) -> np.ndarray:
        return self.values[k]


# -- interpolation --------------------------------------------------------------


@dataclass(frozen=True)
class InterpTable:
    """Flat corner indices and weights for multilinear interpolation at fixed points."""

    index: np.ndarray  # (M, 2**ndim)
    weight: np.ndarray  # (M, 2**ndim)
    outside: int  # points more than one cell outside the box

    def __call__(self, flat_values: np.ndarray) -> np.ndarray:
        return np.einsum("mc,mc->m", flat_values[self.index], self.weight)


def interp_table(grid: StateGrid, x: np.ndarray) -> InterpTable:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    h = grid.spacing
    outside = np.any((x < grid.lower - h) | (x > grid.upper + h), axis=1)
    pos = (np.clip(x, grid.lower, grid.upper) - grid.lower) / h
    n = np.array(grid.points)
    base = np.clip(np.floor(pos).astype(np.int64), 0, n - 2)
    frac = pos - base
    strides = np.array([int(np.prod(n[i + 1:])) for i in range(grid.ndim)], dtype=np.int64)
    corners = list(itertools.product((0, 1), repeat=grid.ndim))
    index = np.empty((len(x), len(corners)), dtype=np.int64)
    weight = np.empty((len(x), len(corners)))
    for c, offs in enumerate(corners):
        offs = np.array(offs)
        index[:, c] = (base + offs) @ strides
        weight[:, c] = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=1)
    return InterpTable(index, weight, int(outside.sum()))


def interpolate(grid: StateGrid, values: np.ndarray, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = interp_table(grid, x.reshape(-1, grid.ndim))(np.asarray(values).ravel())
    return out.reshape(x.shape[:-1]) if x.ndim > 1 else out[0]


# -- backups ------------------------------------------------------------------------


@dataclass
class Successors:
    """Successor states of every node under every (u, d) pair, with margins and interpolation."""

    table: InterpTable
    g_next: np.ndarray  # (N, K_u, K_d)
    l_next: np.ndarray
    shape: tuple[int, int, int]

    @property
    def outside(self) -> int:
        return self.table.outside


def successors(grid: StateGrid, lattice: ActionLattice, env: EnvSpec, margins: MarginSpec) -> Successors:
    nodes = grid.nodes()
    ku, kd = len(lattice.controls), len(lattice.disturbances)
    x = np.broadcast_to(nodes[:, None, None, :], (len(nodes), ku, kd, grid.ndim))
    u = np.broadcast_to(clamp(lattice.controls, env.ctrl_bounds)[None, :, None, :],
                        (len(nodes), ku, kd, env.ctrl_dim))
    d = np.broadcast_to(clamp(lattice.disturbances, env.dstb_bounds)[None, None, :, :],
                        (len(nodes), ku, kd, env.dstb_dim))
    x_next = env.dynamics(x, u, d).reshape(-1, grid.ndim)
    shape = (len(nodes), ku, kd)
    return Successors(interp_table(grid, x_next), margins.failure_margin(x_next).reshape(shape),
                      margins.target_margin(x_next).reshape(shape), shape)


def terminal_values(grid: StateGrid, margins: MarginSpec) -> np.ndarray:
    nodes = grid.nodes()
    return np.minimum(margins.target_margin(nodes), margins.failure_margin(nodes)).reshape(grid.shape)


def _minimax(q: np.ndarray):
    worst = q.min(axis=2)  # (N, K_u)
    ctrl = worst.argmax(axis=1)
    rows = np.arange(len(q))
    dstb = q[rows, ctrl, :].argmin(axis=1)
    return worst[rows, ctrl], ctrl, dstb


def backup(V_next: np.ndarray, grid: StateGrid, lattice: ActionLattice, env: EnvSpec,
           margins: MarginSpec, gamma: float = 1.0, mode: str = "finite",
           succ: Successors | None = None):
    """One max-min Bellman backup. Returns ``(V, ctrl_idx, dstb_idx, n_outside)``."""
    if succ is None:
        succ = successors(grid, lattice, env, margins)
    v_succ = succ.table(np.asarray(V_next, dtype=float).ravel()).reshape(succ.shape)
    if mode == "finite":
        nodes = grid.nodes()
        g = margins.failure_margin(nodes)[:, None, None]
        l = margins.target_margin(nodes)[:, None, None]
        q = np.minimum(g, np.maximum(l, v_succ))
    elif mode == "discounted":
        q = discounted_target(succ.g_next, succ.l_next, v_succ, gamma)
    else:
        raise ValueError(f"unknown backup mode {mode!r}")
    v, ctrl, dstb = _minimax(q)
    return v.reshape(grid.shape), ctrl.reshape(grid.shape), dstb.reshape(grid.shape), succ.outside


def discounted_target(g_next, l_next, v_next, gamma: float):
    """``gamma * min{g', max{l', V'}} + (1 - gamma) * min{l', g'}``."""
    return gamma * np.minimum(g_next, np.maximum(l_next, v_next)) + (1.0 - gamma) * np.minimum(l_next, g_next)


class ConvergenceError(RuntimeError):
    pass


def solve(env: EnvSpec, margins: MarginSpec, grid: StateGrid, lattice: ActionLattice,
          mode: str = "finite", horizon: int = 50, gamma: float = 0.99, tol: float = 1e-6,
          max_iter: int = 10_000) -> ValueGrid:
    succ = successors(grid, lattice, env, margins)
    terminal = terminal_values(grid, margins)
    meta = {"env": env.name, "constants": env.constants, "mode": mode, "outside_successors": succ.outside}
    if mode == "finite":
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        values = np.empty((horizon + 1, *grid.shape))
        ctrl = np.empty((horizon, *grid.shape), dtype=np.int32)
        dstb = np.empty((horizon, *grid.shape), dtype=np.int32)
        values[horizon] = terminal
        for k in range(horizon - 1, -1, -1):
            values[k], ctrl[k], dstb[k], _ = backup(values[k + 1], grid, lattice, env, margins,
                                                    mode="finite", succ=succ)
        meta["horizon"] = horizon
        return ValueGrid(grid, values, ctrl, dstb, lattice, "finite", meta)
    if mode == "discounted":
        V = terminal
        for it in range(1, max_iter + 1):
            V_new, c, d, _ = backup(V, grid, lattice, env, margins, gamma, "discounted", succ)
            residual = float(np.max(np.abs(V_new - V)))
            V = V_new
            if residual < tol:
                meta.update(gamma=gamma, tol=tol, iterations=it, residual=residual)
                return ValueGrid(grid, V[None], c[None].astype(np.int32), d[None].astype(np.int32),
                                 lattice, "discounted", meta)
        raise ConvergenceError(f"no convergence after {max_iter} iterations (residual {residual:.3e})")
    raise ValueError(f"unknown solve mode {mode!r}")


# -- queries ------------------------------------------------------------------------


def value_at(vg: ValueGrid, x, k: int = 0):
    return interpolate(vg.grid, vg.values[k], x)


def nearest_node(grid: StateGrid, x) -> tuple:
    x = np.asarray(x, dtype=float)
    idx = np.rint((np.clip(x, grid.lower, grid.upper) - grid.lower) / grid.spacing).astype(np.int64)
    return tuple(np.moveaxis(idx, -1, 0))


def policy_at(vg: ValueGrid, x, k: int = 0):
    """Nearest-node lookup of the extracted (control, disturbance) pair."""
    layer = min(k, vg.ctrl_policy.shape[0] - 1)
    node = nearest_node(vg.grid, x)
    return vg.lattice.controls[vg.ctrl_policy[layer][node]], vg.lattice.disturbances[vg.dstb_policy[layer][node]]


def lipschitz_estimate(vg: ValueGrid, k: int = 0) -> float:
    """Largest finite-difference slope of a value layer along any grid axis."""
    V = vg.values[k]
    slopes = [np.max(np.abs(np.diff(V, axis=i))) / h for i, h in enumerate(vg.grid.spacing)]
    return float(max(slopes))


def safe_slack(vg: ValueGrid, k: int = 0) -> float:
    """One cell diagonal times the empirical Lipschitz constant of ``V_k``."""
    return float(np.linalg.norm(vg.grid.spacing) * lipschitz_estimate(vg, k))


def certified_nodes(vg: ValueGrid, eta: float | None = None, k: int = 0) -> np.ndarray:
    eta = safe_slack(vg, k) if eta is None else eta
    return vg.grid.nodes()[vg.values[k].ravel() >= eta]


class DPPolicy:
    """Time-indexed callable view of an extracted DP policy (nearest-node lookup)."""

    def __init__(self, vg: ValueGrid, player: str = "ctrl", time_varying: bool = False):
        self.vg, self.player, self.time_varying = vg, player, time_varying
        self.k = 0

    def __call__(self, x):
        layer = self.k if self.time_varying else 0
        if self.time_varying:
            self.k += 1
        u, d = policy_at(self.vg, x, layer)
        return u if self.player == "ctrl" else d


# -- serialization ------------------------------------------------------------------
# Layout (little endian): magic "RGVG", u32 version, u32 ndim, u32 n_value_layers,
# u32 n_policy_layers, ndim x u32 points, ndim x f64 lower, ndim x f64 upper, then
# the value layers as row-major f64, then ctrl and dstb policy layers as row-major i32.


def save(vg: ValueGrid, path) -> None:
    path = Path(path)
    g = vg.grid
    head = struct.pack("<4s4I", MAGIC, FORMAT_VERSION, g.ndim, vg.values.shape[0], vg.ctrl_policy.shape[0])
    head += struct.pack(f"<{g.ndim}I", *g.points)
    head += struct.pack(f"<{2 * g.ndim}d", *g.lower, *g.upper)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(vg.values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(vg.ctrl_policy, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(vg.dstb_policy, dtype="<i4").tobytes())
    sidecar = {
        "format_version": FORMAT_VERSION,
        "mode": vg.mode,
        "controls": vg.lattice.controls.tolist(),
        "disturbances": vg.lattice.disturbances.tolist(),
        "meta": vg.meta,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load(path) -> ValueGrid:
    path = Path(path)
    raw = path.read_bytes()
    magic, version, ndim, n_val, n_pol = struct.unpack_from("<4s4I", raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a value-grid file")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off = 20
    points = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    bounds = struct.unpack_from(f"<{2 * ndim}d", raw, off)
    off += 16 * ndim
    grid = StateGrid(np.array(bounds[:ndim]), np.array(bounds[ndim:]), points)
    size = grid.size
    values = np.frombuffer(raw, "<f8", n_val * size, off).reshape(n_val, *points).astype(float)
    off += 8 * n_val * size
    ctrl = np.frombuffer(raw, "<i4", n_pol * size, off).reshape(n_pol, *points).astype(np.int32)
    off += 4 * n_pol * size
    dstb = np.frombuffer(raw, "<i4", n_pol * size, off).reshape(n_pol, *points).astype(np.int32)
    side = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    lattice = ActionLattice(np.array(side["controls"], dtype=float), np.array(side["disturbances"], dtype=float))
    return ValueGrid(grid, values, ctrl, dstb, lattice, side["mode"], side["meta"])


def zero_level_slice(vg: ValueGrid, k: int = 0, dims=(0, 1), fixed=None) -> np.ndarray:
    """Grid nodes adjacent to a sign change of ``V_k`` in a 2-D slice, shape ``(M, 2)``.

    For grids of dimension > 2 the other axes are fixed at the nearest index of ``fixed``.
    """
    V = vg.values[k]
    if vg.grid.ndim > 2:
        fixed = np.zeros(vg.grid.ndim) if fixed is None else np.asarray(fixed)
        idx = list(nearest_node(vg.grid, fixed))
        for i in dims:
            idx[i] = slice(None)
        V = V[tuple(idx)]
    axes = vg.grid.axes()
    ax0, ax1 = axes[dims[0]], axes[dims[1]]
    pos = V >= 0
    edge = np.zeros_like(pos)
    edge[:-1] |= pos[:-1] != pos[1:]
    edge[1:] |= pos[:-1] != pos[1:]
    edge[:, :-1] |= pos[:, :-1] != pos[:, 1:]
    edge[:, 1:] |= pos[:, :-1] != pos[:, 1:]
    edge &= pos
    i, j = np.nonzero(edge)
    return np.stack([ax0[i], ax1[j]], axis=-1)
