"""Controlled ODE environments, RK4 stepping and episode rollouts.

All vector fields accept batched inputs: ``state`` of shape ``(..., n)`` and
``action`` of shape ``(..., m)``. Actions are held constant over a step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import IntegrationDiverged

ENV_IDS = ("navigation2d", "inverted_pendulum", "vanderpol")


@dataclass(frozen=True, eq=False)
class SystemSpec:
    id: str
    state_dim: int
    action_dim: int
    dt: float
    horizon: int
    action_low: np.ndarray
    action_high: np.ndarray
    x0: np.ndarray
    start_radius: float
    solved_threshold: float
    dynamics: Callable = field(repr=False)
    failure_fn: Callable = field(repr=False)
    reward_fn: Callable = field(repr=False)
    terminal_fn: Callable | None = field(default=None, repr=False)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.state_dim < 1 or self.action_dim < 1:
            raise ValueError("state_dim and action_dim must be >= 1")
        lo = np.asarray(self.action_low, dtype=float).reshape(self.action_dim)
        hi = np.asarray(self.action_high, dtype=float).reshape(self.action_dim)
        if np.any(lo >= hi):
            raise ValueError("action bounds must satisfy low < high componentwise")
        object.__setattr__(self, "action_low", lo)
        object.__setattr__(self, "action_high", hi)
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(self.state_dim))
        if self.start_radius < 0:
            raise ValueError("start_radius must be nonnegative")

    def with_horizon(self, horizon):
        return _replace(self, horizon=int(horizon))


def _replace(spec, **changes):
    import dataclasses

    return dataclasses.replace(spec, **changes)


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    times: np.ndarray
    episode_reward: float
    failed: bool = False

    def __len__(self):
        return len(self.actions)


# --- vector fields ---------------------------------------------------------

def _nav_dynamics(params):
    speed = params["speed"]

    def f(x, u):
        return speed * u

    return f


def _nav_failure(params):
    walls = np.asarray(params["walls"])
    arena = np.asarray(params["arena"])

    def failed(x):
        x = np.asarray(x, dtype=float)
        px, py = x[..., 0], x[..., 1]
        out = (px < arena[0]) | (px > arena[1]) | (py < arena[2]) | (py > arena[3])
        for x_lo, x_hi, y_lo, y_hi in walls:
            out = out | ((px > x_lo) & (px < x_hi) & (py > y_lo) & (py < y_hi))
        return out

    return failed


def _nav_reward(params, dt):
    goal = np.asarray(params["goal"])

    def reward(x, u, x_next):
        return -dt * np.linalg.norm(x_next[..., :2] - goal, axis=-1)

    return reward


def _nav_terminal(params):
    goal = np.asarray(params["goal"])
    goal_radius = params["goal_radius"]
    bonus = params["goal_bonus"]

    def terminal(x):
        return np.where(np.linalg.norm(x[..., :2] - goal, axis=-1) < goal_radius, bonus, 0.0)

    return terminal


def _cartpole_dynamics(params):
    M, m, l, g = params["cart_mass"], params["pole_mass"], params["half_length"], params["gravity"]
    total = M + m

    def f(x, u):
        th, v, w = x[..., 1], x[..., 2], x[..., 3]
        force = u[..., 0]
        sin, cos = np.sin(th), np.cos(th)
        tmp = (force + m * l * w * w * sin) / total
        th_acc = (g * sin - cos * tmp) / (l * (4.0 / 3.0 - m * cos * cos / total))
        x_acc = tmp - m * l * th_acc * cos / total
        return np.stack([v, w, x_acc, th_acc], axis=-1)

    return f


def _cartpole_failure(params):
    limit = params["angle_limit"]

    def failed(x):
        return np.abs(np.asarray(x, dtype=float)[..., 1]) > limit

    return failed


def _survival_reward(x, u, x_next):
    return np.ones(np.shape(x)[:-1])


def _vdp_dynamics(params):
    mu = params["mu"]

    def f(x, u):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, mu * (1.0 - x1 * x1) * x2 - x1 + u[..., 0]], axis=-1)

    return f


def _vdp_failure(params):
    limit = params["state_limit"]

    def failed(x):
        return np.linalg.norm(np.asarray(x, dtype=float), axis=-1) > limit

    return failed


def _vdp_reward(dt):
    def reward(x, u, x_next):
        return -dt * np.sum(x_next * x_next, axis=-1)

    return reward


def make_system(env_id, **overrides):
    """Build one of the built-in systems by id.

    ``overrides`` replaces top-level fields (``horizon``, ``start_radius`` ...)
    or, for keys found in the system's parameter dict, physical constants.
    """
    if env_id == "navigation2d":
        params = {
            "speed": 1.0,
            "goal": (-4.0, -1.0),
            "goal_radius": 0.25,
            "goal_bonus": 100.0,
            # (x_lo, x_hi, y_lo, y_hi): two wall blocks leaving a gap at |y| < 0.6
            "walls": ((-0.5, 0.5, 0.6, 3.0), (-0.5, 0.5, -3.0, -0.6)),
            "arena": (-5.0, 5.0, -3.0, 3.0),
        }
        fields = dict(
            state_dim=2, action_dim=2, dt=0.05, horizon=200,
            action_low=(-1.0, -1.0), action_high=(1.0, 1.0),
            x0=(4.0, 1.0), start_radius=0.1, solved_threshold=50.0,
        )
    elif env_id == "inverted_pendulum":
        params = {
            "cart_mass": 1.0, "pole_mass": 0.1, "half_length": 0.5,
            "gravity": 9.81, "angle_limit": 0.2,
        }
        fields = dict(
            state_dim=4, action_dim=1, dt=0.01, horizon=1000,
            action_low=(-3.0,), action_high=(3.0,),
            x0=(0.0, 0.0, 0.0, 0.0), start_radius=0.05, solved_threshold=1000.0,
        )
    elif env_id == "vanderpol":
        params = {"mu": 1.0, "state_limit": 10.0}
        fields = dict(
            state_dim=2, action_dim=1, dt=0.01, horizon=500,
            action_low=(-5.0,), action_high=(5.0,),
            x0=(1.0, 0.0), start_radius=0.1, solved_threshold=-2.0,
        )
    else:
        raise ValueError(f"unknown environment id {env_id!r}; expected one of {ENV_IDS}")

    for key in list(overrides):
        if key in params:
            params[key] = overrides.pop(key)
    fields.update(overrides)
    dt = fields["dt"]

    if env_id == "navigation2d":
        fns = dict(dynamics=_nav_dynamics(params), failure_fn=_nav_failure(params),
                   reward_fn=_nav_reward(params, dt), terminal_fn=_nav_terminal(params))
    elif env_id == "inverted_pendulum":
        fns = dict(dynamics=_cartpole_dynamics(params), failure_fn=_cartpole_failure(params),
                   reward_fn=_survival_reward)
    else:
        fns = dict(dynamics=_vdp_dynamics(params), failure_fn=_vdp_failure(params),
                   reward_fn=_vdp_reward(dt))
    return SystemSpec(id=env_id, params=params, **fields, **fns)


# --- integration -----------------------------------------------------------

def clamp_action(system, action):
    return np.clip(np.asarray(action, dtype=float), system.action_low, system.action_high)


def rk4(f, x, u, dt):
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step(system, state, action, step_index=0):
    """Advance ``state`` by one ``dt`` under a clamped, zero-order-held action."""
    x = np.asarray(state, dtype=float)
    u = clamp_action(system, action)
    x_next = rk4(system.dynamics, x, u, system.dt)
    if not np.all(np.isfinite(x_next)):
        raise IntegrationDiverged(step_index)
    return x_next


def failure(system, state):
    """True iff the state violates the environment's safety predicate."""
    out = system.failure_fn(np.asarray(state, dtype=float))
    return bool(out) if np.ndim(out) == 0 else out


def _act(policy, state):
    return np.asarray(policy(state), dtype=float)


def flow(system, x, policy, steps):
    """State after ``steps`` closed-loop steps of ``policy`` from ``x``."""
    if steps > system.horizon:
        raise ValueError(f"steps={steps} exceeds horizon {system.horizon}")
    x = np.asarray(x, dtype=float)
    for k in range(steps):
        x = step(system, x, _act(policy, x), k)
    return x


def sample_start(system, rng, n=None):
    """Uniform sample(s) from the start ball around ``system.x0``."""
    size = 1 if n is None else n
    d = system.state_dim
    direction = rng.standard_normal((size, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = system.start_radius * rng.random(size) ** (1.0 / d)
    pts = system.x0 + direction * radius[:, None]
    return pts[0] if n is None else pts


def rollout(system, policy, x0=None, rng_seed=0, noise_sigma2=0.0):
    """Run one episode; terminates early only when ``failure`` fires."""
    from .rng import make_rng

    rng = make_rng(rng_seed, "rollout")
    x = sample_start(system, rng) if x0 is None else np.asarray(x0, dtype=float)
    states = [x]
    actions = []
    reward = 0.0
    failed = False
    for k in range(system.horizon):
        a = _act(policy, x)
        if noise_sigma2 > 0:
            a = a + np.sqrt(noise_sigma2) * rng.standard_normal(a.shape)
        a = clamp_action(system, a)
        x_next = step(system, x, a, k)
        states.append(x_next)
        actions.append(a)
        if system.failure_fn(x_next):
            failed = True
            break
        reward += float(system.reward_fn(x, a, x_next))
        x = x_next
    if not failed and system.terminal_fn is not None:
        reward += float(system.terminal_fn(x))
    n = len(states)
    return Trajectory(
        states=np.array(states),
        actions=np.array(actions).reshape(n - 1, system.action_dim),
        times=system.dt * np.arange(n),
        episode_reward=reward,
        failed=failed,
    )


def batch_rollout(system, policy, x0s, steps=None, noise_sigma2=0.0, rng=None):
    """Vectorized closed-loop rollouts from each row of ``x0s``.

    Integration continues past failures so every trace shares the time grid;
    rewards stop accumulating at the first failure. With ``noise_sigma2 > 0``
    every action gets iid Gaussian noise drawn from ``rng`` before clamping.

    Returns (states (B, steps+1, n), actions (B, steps, m), rewards (B,), failed (B,)).
    """
    steps = system.horizon if steps is None else steps
    x = np.atleast_2d(np.asarray(x0s, dtype=float))
    b = x.shape[0]
    states = np.empty((b, steps + 1, system.state_dim))
    actions = np.empty((b, steps, system.action_dim))
    states[:, 0] = x
    alive = np.ones(b, dtype=bool)
    rewards = np.zeros(b)
    if noise_sigma2 < 0:
        raise ValueError("noise_sigma2 must be nonnegative")
    if noise_sigma2 > 0 and rng is None:
        raise ValueError("noisy rollouts need an rng")
    for k in range(steps):
        a = np.asarray(_act(policy, x), dtype=float).reshape(b, system.action_dim)
        if noise_sigma2 > 0:
            a = a + np.sqrt(noise_sigma2) * rng.standard_normal(a.shape)
        a = clamp_action(system, a)
        x_next = step(system, x, a, k)
        failed_now = system.failure_fn(x_next)
        rewards += np.where(alive & ~failed_now, system.reward_fn(x, a, x_next), 0.0)
        alive &= ~failed_now
        states[:, k + 1] = x_next
        actions[:, k] = a
        x = x_next
    if system.terminal_fn is not None:
        rewards += np.where(alive, system.terminal_fn(x), 0.0)
    return states, actions, rewards, ~alive


def write_trajectory_csv(path, traj):
    n = traj.states.shape[1]
    m = traj.actions.shape[1] if traj.actions.ndim == 2 else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"s{i}" for i in range(n)] + [f"a{j}" for j in range(m)])
        for k, (t, s) in enumerate(zip(traj.times, traj.states)):
            a = traj.actions[k] if k < len(traj.actions) else [""] * m
            w.writerow([repr(float(t))] + [repr(float(v)) for v in s]
                       + [repr(float(v)) if v != "" else "" for v in a])
