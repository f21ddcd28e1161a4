"""Policies: scripted experts, a numpy MLP with exact gradients, and training."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import EmptyBatch, ShapeError

ACTIVATIONS = ("tanh", "relu")
OUTPUTS = ("linear", "sigmoid")


@dataclass(frozen=True, eq=False)
class MlpPolicy:
    layer_sizes: tuple
    weights: tuple
    biases: tuple
    activation: str = "tanh"
    output: str = "linear"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"invalid layer sizes {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.output not in OUTPUTS:
            raise ValueError(f"output must be one of {OUTPUTS}")
        ws = tuple(np.asarray(w, dtype=float) for w in self.weights)
        bs = tuple(np.asarray(b, dtype=float) for b in self.biases)
        if len(ws) != len(sizes) - 1 or len(bs) != len(ws):
            raise ShapeError("need one weight matrix and bias vector per layer")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise ShapeError(
                    f"layer {i}: got W{w.shape}, b{b.shape}; expected "
                    f"W{(sizes[i + 1], sizes[i])}, b{(sizes[i + 1],)}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def output_dim(self):
        return self.layer_sizes[-1]

    def params(self):
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def with_params(self, flat):
        return MlpPolicy(self.layer_sizes, tuple(flat[0::2]), tuple(flat[1::2]),
                         self.activation, self.output)

    def __call__(self, state):
        return evaluate(self, state)


def init_mlp(layer_sizes, rng, activation="tanh", output="linear"):
    """Uniform +-1/sqrt(fan_in) initialisation."""
    sizes = tuple(int(s) for s in layer_sizes)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpPolicy(sizes, tuple(ws), tuple(bs), activation, output)


def default_novice(system, rng, hidden=(64, 64)):
    return init_mlp((system.state_dim, *hidden, system.action_dim), rng)


def default_doubt(system, rng, hidden=(64, 64)):
    return init_mlp((system.state_dim, *hidden, 1), rng, output="sigmoid")


def _act(z, kind):
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_grad(z, a, kind):
    return 1.0 - a * a if kind == "tanh" else (z > 0).astype(float)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(policy, x):
    zs, acts = [], [x]
    h = x
    last = len(policy.weights) - 1
    for i, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        z = h @ w.T + b
        zs.append(z)
        if i < last:
            h = _act(z, policy.activation)
            acts.append(h)
    return zs, acts


def forward_logits(policy, states):
    x = np.asarray(states, dtype=float)
    if x.shape[-1] != policy.input_dim:
        raise ShapeError(f"state has dimension {x.shape[-1]}, policy expects {policy.input_dim}")
    zs, _ = _forward(policy, x.reshape(-1, policy.input_dim))
    return zs[-1].reshape(x.shape[:-1] + (policy.output_dim,))


def evaluate(policy, state):
    """Deterministic action (or doubt probability) for one state or a batch."""
    if isinstance(policy, ExpertPolicy):
        return policy(state)
    out = forward_logits(policy, state)
    return _sigmoid(out) if policy.output == "sigmoid" else out


def _backward(policy, zs, acts, dout):
    grads = [None] * (2 * len(policy.weights))
    delta = dout
    for i in range(len(policy.weights) - 1, -1, -1):
        grads[2 * i] = delta.T @ acts[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            upstream = delta @ policy.weights[i]
            delta = upstream * _act_grad(zs[i - 1], acts[i], policy.activation)
    return grads


def _check_batch(policy, states, targets, target_dim):
    x = np.asarray(states, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim != 2 or len(x) == 0:
        raise EmptyBatch("batch must be a nonempty 2-D array of states")
    y = y.reshape(len(x), -1)
    if x.shape[1] != policy.input_dim or y.shape[1] != target_dim:
        raise ShapeError(f"batch shapes {x.shape}/{y.shape} do not match network {policy.layer_sizes}")
    return x, y


def mse_loss_and_grads(policy, batch_states, batch_expert_actions):
    """Mean squared error over batch and action dimensions, with exact gradients.

    Gradients are returned in ``policy.params()`` order: W0, b0, W1, b1, ...
    """
    x, y = _check_batch(policy, batch_states, batch_expert_actions, policy.output_dim)
    zs, acts = _forward(policy, x)
    diff = zs[-1] - y
    loss = float(np.mean(diff * diff))
    dout = 2.0 * diff / diff.size
    return loss, _backward(policy, zs, acts, dout)


def bce_loss_and_grads(doubt, batch_states, labels):
    """Mean binary cross-entropy of a sigmoid-headed network."""
    if doubt.output != "sigmoid" or doubt.output_dim != 1:
        raise ShapeError("doubt model needs a single sigmoid output")
    x, y = _check_batch(doubt, batch_states, labels, 1)
    zs, acts = _forward(doubt, x)
    z = zs[-1]
    # log(1 + exp(-|z|)) form keeps saturated logits finite
    loss = float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    dout = (_sigmoid(z) - y) / len(x)
    return loss, _backward(doubt, zs, acts, dout)


# --- optimisation ------------------------------------------------------------

@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 64

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr >= 0 and 0 <= momentum < 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need epochs >= 0 and batch_size >= 1")


def sgd_update(policy, grads, lr, velocity=None, momentum=0.0):
    """One momentum-SGD step. Returns ``(new_policy, new_velocity)``."""
    params = policy.params()
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    velocity = [momentum * v + g for v, g in zip(velocity, grads)]
    new = [p - lr * v for p, v in zip(params, velocity)]
    return policy.with_params(new), velocity


def fit(policy, states, targets, optim, rng, loss="mse"):
    """Minibatch momentum SGD over a fixed dataset; returns the new policy."""
    x = np.asarray(states, dtype=float)
    if len(x) == 0 or optim.epochs == 0 or optim.lr == 0:
        return policy
    y = np.asarray(targets, dtype=float).reshape(len(x), -1)
    loss_fn = mse_loss_and_grads if loss == "mse" else bce_loss_and_grads
    velocity = None
    n = len(x)
    for _ in range(optim.epochs):
        order = rng.permutation(n)
        for start in range(0, n, optim.batch_size):
            idx = order[start:start + optim.batch_size]
            _, grads = loss_fn(policy, x[idx], y[idx])
            policy, velocity = sgd_update(policy, grads, optim.lr, velocity, optim.momentum)
    return policy


# --- experts -----------------------------------------------------------------

EXPERT_KINDS = ("pd_pendulum", "potential_field_nav2d", "lqr_vanderpol")


@dataclass(frozen=True, eq=False)
class ExpertPolicy:
    kind: str
    gains: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EXPERT_KINDS:
            raise ValueError(f"unknown expert kind {self.kind!r}")
        g = np.asarray(self.gains, dtype=float)
        if not np.all(np.isfinite(g)):
            raise ValueError("expert gains must be finite")
        object.__setattr__(self, "gains", g)
        object.__setattr__(self, "action_low", np.asarray(self.action_low, dtype=float))
        object.__setattr__(self, "action_high", np.asarray(self.action_high, dtype=float))

    def __call__(self, state):
        x = np.asarray(state, dtype=float)
        if self.kind == "potential_field_nav2d":
            to_goal = np.asarray(self.params["goal"]) - x[..., :2]
            dist = np.linalg.norm(to_goal, axis=-1, keepdims=True)
            # unit-speed pull toward the goal, slowing linearly inside `slow_radius`
            scale = self.gains[0] / np.maximum(dist, self.params["slow_radius"])
            u = to_goal * scale
        else:
            u = -(x @ self.gains.T)
        return np.clip(u, self.action_low, self.action_high)


def _linearize(system, eps=1e-6):
    n, m = system.state_dim, system.action_dim
    x0 = np.zeros(n)
    u0 = np.zeros(m)
    a = np.empty((n, n))
    b = np.empty((n, m))
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        a[:, i] = (system.dynamics(x0 + e, u0) - system.dynamics(x0 - e, u0)) / (2 * eps)
    for j in range(m):
        e = np.zeros(m)
        e[j] = eps
        b[:, j] = (system.dynamics(x0, u0 + e) - system.dynamics(x0, u0 - e)) / (2 * eps)
    return a, b


def _lqr(a, b, q, r):
    p = scipy.linalg.solve_continuous_are(a, b, q, r)
    return np.linalg.solve(r, b.T @ p)


def default_expert(system):
    """Scripted expert for a built-in system."""
    if system.id == "inverted_pendulum":
        # Angle PD plus cart-velocity damping; cart position is left free, which
        # keeps one marginal mode and hence a tube that does not collapse.
        a, b = _linearize(system)
        keep = [1, 2, 3]
        k = _lqr(a[np.ix_(keep, keep)], b[keep], np.diag([10.0, 1.0, 1.0]), np.eye(1))
        gains = np.zeros((1, 4))
        gains[:, keep] = k
        return ExpertPolicy("pd_pendulum", gains, system.action_low, system.action_high)
    if system.id == "vanderpol":
        a, b = _linearize(system)
        k = _lqr(a, b, np.eye(2), np.eye(1))
        return ExpertPolicy("lqr_vanderpol", k, system.action_low, system.action_high)
    if system.id == "navigation2d":
        return ExpertPolicy(
            "potential_field_nav2d", np.array([1.0]),
            system.action_low, system.action_high,
            params={"goal": tuple(system.params["goal"]), "slow_radius": 1.0},
        )
    raise ValueError(f"no scripted expert for {system.id!r}")


def noisy_action(action, noise_sigma2, rng):
    """Add iid N(0, sigma2) noise per action dimension."""
    if noise_sigma2 < 0:
        raise ValueError("noise variance must be nonnegative")
    a = np.asarray(action, dtype=float)
    if noise_sigma2 == 0:
        return a.copy()
    return a + np.sqrt(noise_sigma2) * rng.standard_normal(a.shape)


# --- checkpoints ---------------------------------------------------------------

def policy_to_dict(policy):
    return {
        "layer_sizes": list(policy.layer_sizes),
        "activation": policy.activation,
        "output": policy.output,
        "weights": [w.tolist() for w in policy.weights],
        "biases": [b.tolist() for b in policy.biases],
    }


def policy_from_dict(d):
    return MlpPolicy(
        tuple(d["layer_sizes"]),
        tuple(np.array(w, dtype=float).reshape(len(w), -1) for w in d["weights"]),
        tuple(np.array(b, dtype=float) for b in d["biases"]),
        d.get("activation", "tanh"),
        d.get("output", "linear"),
    )


def save_policy(path, policy):
    with open(path, "w") as fh:
        json.dump(policy_to_dict(policy), fh)


def load_policy(path):
    with open(path) as fh:
        return policy_from_dict(json.load(fh))
