"""Benchmark environments: discrete-time dynamics with bounded control and disturbance.

Every map here is vectorized over leading axes, so ``x`` may be a single state of
shape ``(n,)`` or a batch of shape ``(..., n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg

Array = np.ndarray
GRAVITY = 9.81


@dataclass(frozen=True, eq=False)
class EnvSpec:
    name: str
    state_dim: int
    ctrl_dim: int
    dstb_dim: int
    dt: float
    ctrl_bounds: Array  # (ctrl_dim, 2)
    dstb_bounds: Array  # (dstb_dim, 2)
    deploy_box: Array  # (state_dim, 2)
    dynamics: Callable[[Array, Array, Array], Array]
    state_box: Array  # representable domain used for resets and grids
    constants: dict = field(default_factory=dict)
    goal: Array | None = None
    position_dims: tuple = (0,)

    def __post_init__(self):
        for attr in ("ctrl_bounds", "dstb_bounds", "deploy_box", "state_box"):
            arr = np.asarray(getattr(self, attr), dtype=float).reshape(-1, 2)
            if np.any(arr[:, 0] > arr[:, 1]):
                raise ValueError(f"{attr}: empty interval")
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)


@dataclass(frozen=True, eq=False)
class MarginSpec:
    failure_margin: Callable[[Array], Array]
    target_margin: Callable[[Array], Array]
    invariant_controller: Callable[[Array], Array]


def clamp(x: Array, bounds: Array) -> Array:
    return np.clip(x, bounds[:, 0], bounds[:, 1])


def step(env: EnvSpec, x, u, d) -> Array:
    """One transition ``x' = f(x, u, d)``; out-of-bounds inputs are saturated."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite state")
    u = clamp(np.asarray(u, dtype=float), env.ctrl_bounds)
    d = clamp(np.asarray(d, dtype=float), env.dstb_bounds)
    return env.dynamics(x, u, d)


def sample_initial(env: EnvSpec, rng: np.random.Generator, n: int | None = None) -> Array:
    lo, hi = env.deploy_box[:, 0], env.deploy_box[:, 1]
    shape = (env.state_dim,) if n is None else (n, env.state_dim)
    return lo + (hi - lo) * rng.random(shape)


def sample_box(box: Array, rng: np.random.Generator, n: int) -> Array:
    return box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((n, len(box)))


def margins(spec: MarginSpec, x) -> tuple[Array, Array]:
    """Return ``(g(x), l(x))``: failure margin (negative inside F) and target margin."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite state")
    return spec.failure_margin(x), spec.target_margin(x)


def ellipse_margin(P: Array, radius: float) -> Callable[[Array], Array]:
    """``radius - sqrt(x' P x)``; Lipschitz, positive inside the ellipse."""
    P = np.array(P, dtype=float)

    def target(x):
        x = np.asarray(x, dtype=float)
        q = np.einsum("...i,ij,...j->...", x, P, x)
        return radius - np.sqrt(np.maximum(q, 0.0))

    return target


# -- double integrator ---------------------------------------------------------


def double_integrator(d_max: float = 0.3, dt: float = 0.1, u_max: float = 1.0,
                      target_shape: str = "ellipse", target_radius: float = 0.18):
    def dynamics(x, u, d):
        p, v = x[..., 0], x[..., 1]
        v_next = v + dt * (u[..., 0] + d[..., 0])
        return np.stack([p + dt * v_next, v_next], axis=-1)

    def failure(x):
        return 1.0 - np.abs(x[..., 0])

    def box_target(x):
        return np.minimum(0.2 - np.abs(x[..., 0]), 0.2 - np.abs(x[..., 1]))

    # Lyapunov matrix of the closed loop p'' = -4p - 3v
    P = scipy.linalg.solve_continuous_lyapunov(np.array([[0.0, -4.0], [1.0, -3.0]]), -np.eye(2))
    target = box_target if target_shape == "box" else ellipse_margin(P, target_radius)

    def invariant(x):
        return np.clip(-4.0 * x[..., 0] - 3.0 * x[..., 1], -u_max, u_max)[..., None]

    env = EnvSpec(
        name="double_integrator", state_dim=2, ctrl_dim=1, dstb_dim=1, dt=dt,
        ctrl_bounds=[[-u_max, u_max]], dstb_bounds=[[-d_max, d_max]],
        deploy_box=[[-0.1, 0.1], [-0.1, 0.1]], dynamics=dynamics,
        state_box=[[-1.1, 1.1], [-2.0, 2.0]],
        constants=dict(d_max=d_max, dt=dt, u_max=u_max, target_shape=target_shape,
                       target_radius=target_radius),
        goal=np.array([0.9, 0.0]),
    )
    return env, MarginSpec(failure, target, invariant)


# -- inverted pendulum ---------------------------------------------------------


def pendulum(d_max: float = 0.5, dt: float = 0.05, u_max: float = 2.0, mass: float = 1.0,
             length: float = 1.0, g_grav: float = GRAVITY, target_shape: str = "ellipse",
             target_radius: float = 0.11):
    inertia = mass * length**2

    def dynamics(x, u, d):
        th, om = x[..., 0], x[..., 1]
        acc = (g_grav / length) * np.sin(th) + (u[..., 0] + d[..., 0]) / inertia
        om_next = om + dt * acc
        return np.stack([th + dt * om_next, om_next], axis=-1)

    def failure(x):
        return np.pi / 2 - np.abs(x[..., 0])

    def box_target(x):
        return np.minimum(0.1 - np.abs(x[..., 0]), 0.5 - np.abs(x[..., 1]))

    # closed loop under the invariant law is th'' = -8 th - 4 om (away from saturation)
    P = scipy.linalg.solve_continuous_lyapunov(np.array([[0.0, -8.0], [1.0, -4.0]]), -np.eye(2))
    target = box_target if target_shape == "box" else ellipse_margin(P, target_radius)

    def invariant(x):
        th, om = x[..., 0], x[..., 1]
        u = -inertia * ((g_grav / length) * np.sin(th) + 8.0 * th + 4.0 * om)
        return np.clip(u, -u_max, u_max)[..., None]

    env = EnvSpec(
        name="pendulum", state_dim=2, ctrl_dim=1, dstb_dim=1, dt=dt,
        ctrl_bounds=[[-u_max, u_max]], dstb_bounds=[[-d_max, d_max]],
        deploy_box=[[-0.05, 0.05], [-0.05, 0.05]], dynamics=dynamics,
        state_box=[[-0.6, 0.6], [-2.0, 2.0]],
        constants=dict(d_max=d_max, dt=dt, u_max=u_max, mass=mass, length=length,
                       g_grav=g_grav, target_shape=target_shape, target_radius=target_radius),
        goal=np.array([0.3, 0.0]),
    )
    return env, MarginSpec(failure, target, invariant)


# -- planar quadrotor ----------------------------------------------------------
# state (x, z, theta, xdot, zdot, thetadot); controls are the two rotor thrusts;
# disturbance is a wind force in (x, z).


KX, KDX, KZ, KDZ = 3.2, 3.1, 9.0, 4.9
QW = (0.6, 6.2, 1.9, 2.1, 1.7, 0.66)  # Lyapunov state weights, tuned for robust invariance


def planar_quadrotor(d_max: float = 0.2, dt: float = 0.02, mass: float = 1.0,
                     inertia: float = 0.02, arm: float = 0.15, thrust_max: float = 15.0,
                     target_radius: float = 0.25):
    def dynamics(x, u, d):
        th = x[..., 2]
        thrust = u[..., 0] + u[..., 1]
        ax = (-thrust * np.sin(th) + d[..., 0]) / mass
        az = (thrust * np.cos(th) + d[..., 1]) / mass - GRAVITY
        ath = arm * (u[..., 1] - u[..., 0]) / inertia
        vel = x[..., 3:] + dt * np.stack([ax, az, ath], axis=-1)
        return np.concatenate([x[..., :3] + dt * vel, vel], axis=-1)

    def failure(x):
        return np.minimum.reduce([1.5 - np.abs(x[..., 0]), 1.0 - np.abs(x[..., 1]),
                                  0.8 - np.abs(x[..., 2])])

    def invariant(x):
        px, pz, th, vx, vz, om = (x[..., i] for i in range(6))
        th_des = np.clip((KX * px + KDX * vx) / GRAVITY, -0.4, 0.4)
        force = mass * (GRAVITY - KZ * pz - KDZ * vz) / np.cos(th)
        torque = inertia * (100.0 * (th_des - th) - 20.0 * om) / arm
        u = np.stack([(force - torque) / 2, (force + torque) / 2], axis=-1)
        return np.clip(u, 0.0, thrust_max)

    # discrete Lyapunov matrix of the linearized closed loop around hover
    def closed_loop(x):
        u = invariant(x)
        return dynamics(x, u, np.zeros(x.shape[:-1] + (2,)))

    h = 1e-6
    A = np.stack([(closed_loop(h * e) - closed_loop(-h * e)) / (2 * h) for e in np.eye(6)], axis=1)
    P = scipy.linalg.solve_discrete_lyapunov(A.T, dt * np.diag(QW))
    P = P / np.max(np.linalg.eigvalsh(P))

    env = EnvSpec(
        name="planar_quadrotor", state_dim=6, ctrl_dim=2, dstb_dim=2, dt=dt,
        ctrl_bounds=[[0.0, thrust_max]] * 2, dstb_bounds=[[-d_max, d_max]] * 2,
        deploy_box=[[-0.05, 0.05]] * 6, dynamics=dynamics,
        state_box=[[-1.6, 1.6], [-1.1, 1.1], [-0.9, 0.9], [-3.0, 3.0], [-3.0, 3.0], [-6.0, 6.0]],
        constants=dict(d_max=d_max, dt=dt, mass=mass, inertia=inertia, arm=arm,
                       thrust_max=thrust_max, target_radius=target_radius),
        goal=np.array([1.2, 0.0, 0.0, 0.0, 0.0, 0.0]),
        position_dims=(0, 1),
    )
    return env, MarginSpec(failure, ellipse_margin(P, target_radius), invariant)


ENVIRONMENTS = {
    "double_integrator": double_integrator,
    "pendulum": pendulum,
    "planar_quadrotor": planar_quadrotor,
}


def make_env(name: str, **overrides) -> tuple[EnvSpec, MarginSpec]:
    try:
        factory = ENVIRONMENTS[name]
    except KeyError:
        raise KeyError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return factory(**overrides)


def goal_seeking_policy(env: EnvSpec, margins: MarginSpec | None = None) -> Callable[[Array], Array]:
    """Scripted task controller that drives aggressively towards ``env.goal``.

    It ignores the failure set, so it is the natural candidate for filtering.
    """
    goal = env.goal
    if env.name == "double_integrator":
        def task(x):
            u = 3.0 * (goal[0] - x[..., 0]) - 1.0 * x[..., 1]
            return clamp(u[..., None], env.ctrl_bounds)
    elif env.name == "pendulum":
        g_grav, length = env.constants["g_grav"], env.constants["length"]
        inertia = env.constants["mass"] * length**2

        def task(x):
            th, om = x[..., 0], x[..., 1]
            u = -inertia * ((g_grav / length) * np.sin(th) + 6.0 * (th - goal[0]) + 1.0 * om)
            return clamp(u[..., None], env.ctrl_bounds)
    elif env.name == "planar_quadrotor":
        if margins is None:
            raise ValueError("planar_quadrotor task policy needs the margin spec")
        hover = margins.invariant_controller

        def task(x):
            return hover(np.asarray(x) - goal)
    else:
        raise KeyError(env.name)
    return task


def progress(env: EnvSpec, states: Array) -> float:
    """Distance from the final position to the task goal (smaller is better)."""
    dims = list(env.position_dims)
    final = np.asarray(states)[..., -1, :]
    return float(np.mean(np.linalg.norm(final[..., dims] - env.goal[dims], axis=-1)))
