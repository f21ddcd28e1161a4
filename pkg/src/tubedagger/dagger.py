"""Interactive imitation-learning loops and their metrics.

All loops share one episode driver: a gate picks the actor each step,
expert steps are recorded into the aggregated dataset and executed with
Gaussian action noise, novice steps execute the novice action unchanged.
After every collection episode the novice is refit on the whole dataset
and evaluated on a fixed set of start states without any expert help.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .envs import batch_rollout, clamp_action, sample_start, step
from .errors import ConfigError, InsufficientEnsemble, ShapeError
from .gating import (
    Actor,
    DoubtGateConfig,
    GateState,
    TubeGateConfig,
    doubt_gate,
    ensemble_predictions,
    make_doubt_labels,
    tube_gate,
)
from .policies import OptimConfig, evaluate, fit, noisy_action
from .reachtube import membership
from .rng import make_rng

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "episode",
    "eval_reward_median",
    "eval_reward_std",
    "combined_reward",
    "context_switches_cum",
    "expert_actions_cum",
    "novice_action_pct",
    "dataset_size",
    "solved",
)


class Dataset:
    """Append-only (state, expert action) pairs."""

    def __init__(self, state_dim, action_dim):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self._states = []
        self._actions = []

    def __len__(self):
        return len(self._states)

    def add(self, state, action):
        s = np.asarray(state, dtype=float).ravel()
        a = np.asarray(action, dtype=float).ravel()
        if s.size != self.state_dim or a.size != self.action_dim:
            raise ShapeError(
                f"expected state {self.state_dim} and action {self.action_dim}, got {s.size} and {a.size}"
            )
        self._states.append(s)
        self._actions.append(a)

    def extend(self, states, actions):
        for s, a in zip(states, actions):
            self.add(s, a)

    @property
    def states(self):
        return np.array(self._states).reshape(len(self), self.state_dim)

    @property
    def actions(self):
        return np.array(self._actions).reshape(len(self), self.action_dim)


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 60
    horizon: int | None = None
    sigma2: float = 0.01
    gate: TubeGateConfig | DoubtGateConfig | None = None
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval_episodes: int = 5
    solved_threshold: float | None = None
    seed: int = 0
    stop_on_solve: bool = False
    seed_demos: int = 0

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if self.sigma2 < 0:
            raise ConfigError("sigma2 must be nonnegative")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class MetricsRecord:
    episode: int
    eval_reward_median: float
    eval_reward_std: float
    combined_reward: float
    context_switches_cum: int
    expert_actions_cum: int
    novice_action_pct: float
    dataset_size: int
    solved: bool
    flags: tuple = ()

    def row(self):
        return [getattr(self, c) for c in METRICS_COLUMNS]


def evaluate_policy(system, policy, n_episodes, seed):
    """Median and population std of episode rewards from the policy alone."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    starts = sample_start(system, make_rng(seed, "eval-starts"), n_episodes)
    _, _, rewards, _ = batch_rollout(system, policy, starts)
    return float(np.median(rewards)), float(np.std(rewards))


def _run_loop(system, expert, cfg, decide, retrain, deployed, flags=()):
    """Shared episode driver.

    ``decide(t, state, mode) -> (actor, next_mode, novice_action)``;
    ``retrain(dataset, episode)`` refits the learned parts;
    ``deployed()`` returns the policy evaluated after each episode.
    """
    system = system.with_horizon(cfg.horizon) if cfg.horizon else system
    threshold = system.solved_threshold if cfg.solved_threshold is None else cfg.solved_threshold
    data = Dataset(system.state_dim, system.action_dim)
    if cfg.seed_demos:
        _seed_dataset(system, expert, cfg, data)
    gate = GateState()
    metrics = []
    solved = False
    for ep in range(cfg.episodes):
        start_rng = make_rng(cfg.seed, "start", ep)
        noise_rng = make_rng(cfg.seed, "noise", ep)
        x = sample_start(system, start_rng)
        gate.begin_episode()
        expert_before = gate.expert_actions
        novice_before = gate.novice_actions
        combined = 0.0
        alive = True
        for t in range(system.horizon):
            actor, next_mode, novice_action = decide(t, x, gate.mode)
            if actor is Actor.EXPERT:
                a_star = np.asarray(expert(x), dtype=float)
                data.add(x, a_star)
                a = noisy_action(a_star, cfg.sigma2, noise_rng)
            else:
                a = novice_action
            gate.record(actor, next_mode)
            a = clamp_action(system, a)
            x_next = step(system, x, a, t)
            if system.failure_fn(x_next):
                alive = False
                break
            combined += float(system.reward_fn(x, a, x_next))
            x = x_next
        if alive and system.terminal_fn is not None:
            combined += float(system.terminal_fn(x))
        gate.end_episode()

        retrain(data, ep)
        med, std = evaluate_policy(system, deployed(), cfg.eval_episodes, cfg.seed)
        solved = solved or med >= threshold
        n_exp = gate.expert_actions - expert_before
        n_nov = gate.novice_actions - novice_before
        rec = MetricsRecord(
            episode=ep,
            eval_reward_median=med,
            eval_reward_std=std,
            combined_reward=combined,
            context_switches_cum=gate.context_switches,
            expert_actions_cum=gate.expert_actions,
            novice_action_pct=100.0 * n_nov / max(n_nov + n_exp, 1),
            dataset_size=len(data),
            solved=solved,
            flags=tuple(flags),
        )
        metrics.append(rec)
        log.debug("episode %d: eval %.2f combined %.2f novice %.1f%% |D|=%d",
                  ep, med, combined, rec.novice_action_pct, len(data))
        if solved and cfg.stop_on_solve:
            break
    return metrics


def _seed_dataset(system, expert, cfg, data):
    starts = sample_start(system, make_rng(cfg.seed, "seed-demos"), cfg.seed_demos)
    states, _, _, _ = batch_rollout(system, expert, starts)
    flat = states[:, :-1].reshape(-1, system.state_dim)
    data.extend(flat, np.asarray(expert(flat)))


def _check_tube(system, tube, cfg):
    horizon = cfg.horizon or system.horizon
    if tube.horizon < horizon:
        raise ConfigError(f"tube covers {tube.horizon} steps but the run needs {horizon}")
    src = tube.source.get("system")
    if src is not None and src != system.id:
        raise ConfigError(f"tube was built for {src!r}, not {system.id!r}")
    expected = system.state_dim + (system.action_dim if tube.source.get("include_action") else 0)
    if tube.dim != expected:
        raise ConfigError(f"tube dimension {tube.dim} does not match system ({expected})")
    if len(tube) > 1 and not np.isclose(tube.slices[1].tau, system.dt, rtol=1e-9):
        raise ConfigError("tube time step differs from the system dt")


def tubedagger_train(system, expert, novice, tube, cfg):
    """Tube-gated DAgger: the expert steps in when the state leaves the
    beta_plus-scaled tube slice and hands back below beta_minus."""
    gate_cfg = cfg.gate if cfg.gate is not None else TubeGateConfig()
    if not isinstance(gate_cfg, TubeGateConfig):
        raise ConfigError("tubedagger needs a TubeGateConfig")
    _check_tube(system, tube, cfg)
    with_action = bool(tube.source.get("include_action"))
    state = {"novice": novice}

    def decide(t, x, mode):
        a = np.asarray(evaluate(state["novice"], x), dtype=float)
        query = np.concatenate([x, a]) if with_action else x
        rho = membership(tube.slices[t], query)
        actor, next_mode = tube_gate(rho, mode, gate_cfg)
        return actor, next_mode, a

    def retrain(data, ep):
        state["novice"] = fit(state["novice"], data.states, data.actions, cfg.optim,
                              make_rng(cfg.seed, "minibatch", ep))

    metrics = _run_loop(system, expert, cfg, decide, retrain, lambda: state["novice"])
    return state["novice"], metrics


def default_tau_m(system):
    return 0.1 * float(np.linalg.norm(system.action_high - system.action_low))


def lazydagger_train(system, expert, novice, doubt, cfg):
    """Doubt-model-gated DAgger with dual thresholds.

    The novice is refit on the aggregated dataset as usual. The doubt model
    is refit on every state visited during collection, labelled unsafe where
    the freshly updated novice misses the expert action by ``tau_m`` or more.
    Those expert labels are classifier targets only; they are not counted as
    interventions and never enter the novice's dataset.
    """
    gate_cfg = cfg.gate if cfg.gate is not None else DoubtGateConfig()
    if not isinstance(gate_cfg, DoubtGateConfig):
        raise ConfigError("lazydagger needs a DoubtGateConfig")
    if gate_cfg.tau_low > gate_cfg.tau_high:
        raise ConfigError("tau_low must not exceed tau_high")
    tau_m = default_tau_m(system) if gate_cfg.tau_m is None else gate_cfg.tau_m
    state = {"novice": novice, "doubt": doubt}
    visited = []

    def decide(t, x, mode):
        visited.append(x)
        p = float(evaluate(state["doubt"], x)[0])
        actor, next_mode = doubt_gate(p, mode, gate_cfg)
        a = evaluate(state["novice"], x) if actor is Actor.NOVICE else None
        return actor, next_mode, a

    def retrain(data, ep):
        if len(data):
            state["novice"] = fit(state["novice"], data.states, data.actions, cfg.optim,
                                  make_rng(cfg.seed, "minibatch", ep))
        pool = np.array(visited)
        labels = make_doubt_labels(evaluate(state["novice"], pool), expert(pool), tau_m)
        state["doubt"] = fit(state["doubt"], pool, labels, cfg.optim,
                             make_rng(cfg.seed, "doubt-minibatch", ep), loss="bce")

    metrics = _run_loop(system, expert, cfg, decide, retrain, lambda: state["novice"])
    return state["novice"], state["doubt"], metrics


class EnsemblePolicy:
    """Mean action of several networks."""

    def __init__(self, members):
        self.members = list(members)

    def __call__(self, state):
        return ensemble_predictions(self.members, state).mean(axis=0)


def ensembledagger_train(system, expert, ensemble, cfg):
    """Variance-gated DAgger over an ensemble sharing one dataset."""
    members = list(ensemble)
    if len(members) < 2:
        raise InsufficientEnsemble(f"ensemble needs at least 2 members, got {len(members)}")
    gate_cfg = cfg.gate if cfg.gate is not None else DoubtGateConfig(0.001, 0.01)
    if not isinstance(gate_cfg, DoubtGateConfig):
        raise ConfigError("ensembledagger needs a DoubtGateConfig (variance thresholds)")
    state = {"members": members}
    flags = []
    if all(_same_params(members[0], m) for m in members[1:]):
        log.warning("ensemble members are identical; variance is zero and the expert never intervenes")
        flags.append("zero_variance")

    def decide(t, x, mode):
        preds = ensemble_predictions(state["members"], x)
        var = float(preds.var(axis=0).mean())
        actor, next_mode = doubt_gate(var, mode, gate_cfg)
        return actor, next_mode, preds.mean(axis=0)

    def retrain(data, ep):
        state["members"] = [
            fit(m, data.states, data.actions, cfg.optim, make_rng(cfg.seed, "minibatch", ep, i))
            for i, m in enumerate(state["members"])
        ]

    metrics = _run_loop(system, expert, cfg, decide, retrain,
                        lambda: EnsemblePolicy(state["members"]), flags)
    return state["members"], metrics


def _same_params(a, b):
    return all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))


def behavioral_cloning(system, expert, novice, n_demos, cfg):
    """Fit the novice once on ``n_demos`` expert-controlled episodes."""
    if n_demos < 1:
        raise ValueError("n_demos must be >= 1")
    system = system.with_horizon(cfg.horizon) if cfg.horizon else system
    threshold = system.solved_threshold if cfg.solved_threshold is None else cfg.solved_threshold
    data = Dataset(system.state_dim, system.action_dim)
    combined = []
    for ep in range(n_demos):
        x = sample_start(system, make_rng(cfg.seed, "start", ep))
        noise_rng = make_rng(cfg.seed, "noise", ep)
        total = 0.0
        alive = True
        for t in range(system.horizon):
            a_star = np.asarray(expert(x), dtype=float)
            data.add(x, a_star)
            a = clamp_action(system, noisy_action(a_star, cfg.sigma2, noise_rng))
            x_next = step(system, x, a, t)
            if system.failure_fn(x_next):
                alive = False
                break
            total += float(system.reward_fn(x, a, x_next))
            x = x_next
        if alive and system.terminal_fn is not None:
            total += float(system.terminal_fn(x))
        combined.append(total)
    novice = fit(novice, data.states, data.actions, cfg.optim, make_rng(cfg.seed, "minibatch", 0))
    med, std = evaluate_policy(system, novice, cfg.eval_episodes, cfg.seed)
    rec = MetricsRecord(
        episode=n_demos - 1,
        eval_reward_median=med,
        eval_reward_std=std,
        combined_reward=float(np.mean(combined)),
        context_switches_cum=0,
        expert_actions_cum=len(data),
        novice_action_pct=0.0,
        dataset_size=len(data),
        solved=med >= threshold,
    )
    return novice, [rec]


def context_switches_until_solved(metrics):
    """(cumulative switches at the first solved episode, solved flag).

    Falls back to the run total with ``solved=False``.
    """
    if not metrics:
        raise ValueError("metrics series is empty")
    for rec in metrics:
        if rec.solved:
            return rec.context_switches_cum, True
    return metrics[-1].context_switches_cum, False


def first_solved_episode(metrics):
    for rec in metrics:
        if rec.solved:
            return rec.episode
    return None


# --- CSV ------------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, metrics):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for rec in metrics:
            w.writerow([_fmt(v) for v in rec.row()])


def read_metrics_csv(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        for row in reader:
            out.append(MetricsRecord(
                episode=int(row["episode"]),
                eval_reward_median=float(row["eval_reward_median"]),
                eval_reward_std=float(row["eval_reward_std"]),
                combined_reward=float(row["combined_reward"]),
                context_switches_cum=int(row["context_switches_cum"]),
                expert_actions_cum=int(row["expert_actions_cum"]),
                novice_action_pct=float(row["novice_action_pct"]),
                dataset_size=int(row["dataset_size"]),
                solved=row["solved"] == "1",
            ))
    return out


def validate_metrics(metrics):
    """Raise ValueError if a series breaks the record invariants."""
    prev = None
    for rec in metrics:
        if not 0.0 <= rec.novice_action_pct <= 100.0:
            raise ValueError(f"episode {rec.episode}: novice_action_pct out of range")
        if prev is not None:
            for name in ("context_switches_cum", "expert_actions_cum", "dataset_size"):
                if getattr(rec, name) < getattr(prev, name):
                    raise ValueError(f"episode {rec.episode}: {name} decreased")
            if prev.solved and not rec.solved:
                raise ValueError(f"episode {rec.episode}: solved flag dropped")
        prev = rec
