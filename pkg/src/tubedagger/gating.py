"""Hysteresis gates that decide whether the novice or the expert acts."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InsufficientEnsemble
from .policies import evaluate


class Mode(enum.Enum):
    AUTONOMOUS = "Autonomous"
    SUPERVISOR = "Supervisor"


class Actor(enum.Enum):
    NOVICE = "Novice"
    EXPERT = "Expert"


@dataclass(frozen=True)
class TubeGateConfig:
    """Thresholds on the tube membership value.

    ``beta_minus == beta_plus`` is accepted as a single-threshold degenerate
    (e.g. both zero reduces the loop to behavioural cloning).
    """

    beta_minus: float = 0.2
    beta_plus: float = 0.7

    def __post_init__(self):
        if self.beta_minus < 0 or self.beta_plus < 0:
            raise ConfigError("tube thresholds must be nonnegative")
        if self.beta_minus > self.beta_plus:
            raise ConfigError(
                f"beta_minus ({self.beta_minus}) must not exceed beta_plus ({self.beta_plus})"
            )

    @property
    def low(self):
        return self.beta_minus

    @property
    def high(self):
        return self.beta_plus


@dataclass(frozen=True)
class DoubtGateConfig:
    """Thresholds on a doubt probability (or ensemble variance).

    ``tau_m`` is the action distance at or beyond which a novice action is
    labelled unsafe when training the doubt model. ``tau_low == tau_high``
    gives a single-threshold gate.
    """

    tau_low: float = 0.1
    tau_high: float = 0.5
    tau_m: float | None = None

    def __post_init__(self):
        if self.tau_low > self.tau_high:
            raise ConfigError(f"tau_low ({self.tau_low}) must not exceed tau_high ({self.tau_high})")

    @property
    def low(self):
        return self.tau_low

    @property
    def high(self):
        return self.tau_high


def hysteresis_gate(signal, mode, low, high):
    """Shared dual-threshold rule.

    The expert acts when already supervising or when ``signal > high``; after
    an expert step control is released iff ``signal < low``. Ties keep the
    current regime.
    """
    if mode is Mode.SUPERVISOR or signal > high:
        return Actor.EXPERT, (Mode.AUTONOMOUS if signal < low else Mode.SUPERVISOR)
    return Actor.NOVICE, Mode.AUTONOMOUS


def tube_gate(rho, state_mode, cfg):
    if rho < 0:
        raise ValueError("membership value must be nonnegative")
    return hysteresis_gate(rho, state_mode, cfg.beta_minus, cfg.beta_plus)


def doubt_gate(doubt_prob, state_mode, cfg):
    if not np.isfinite(doubt_prob):
        raise ValueError("doubt probability must be finite")
    return hysteresis_gate(doubt_prob, state_mode, cfg.tau_low, cfg.tau_high)


def ensemble_predictions(ensemble, state):
    return np.stack([evaluate(p, state) for p in ensemble])


def ensemble_variance(ensemble, state):
    """Across-member population variance of the action, averaged over action dims."""
    if len(ensemble) < 2:
        raise InsufficientEnsemble(f"ensemble needs at least 2 members, got {len(ensemble)}")
    preds = ensemble_predictions(ensemble, state)
    return preds.var(axis=0).mean(axis=-1)


def make_doubt_labels(novice_actions, expert_actions, tau_m):
    """1 (unsafe) iff ||novice - expert||_2 >= tau_m, else 0."""
    diff = np.asarray(novice_actions, dtype=float) - np.asarray(expert_actions, dtype=float)
    dist = np.linalg.norm(diff.reshape(len(diff), -1), axis=1)
    return (dist >= tau_m).astype(float)


def count_switches(actors):
    """Adjacent unequal pairs in an actor sequence."""
    seq = [a.value if isinstance(a, enum.Enum) else a for a in actors]
    return sum(1 for a, b in zip(seq, seq[1:]) if a != b)


@dataclass
class GateState:
    """Per-run bookkeeping of who controlled each step.

    Every episode starts and ends in autonomous control, so a supervised
    stretch that runs to the end of an episode still counts as two switches.
    """

    mode: Mode = Mode.AUTONOMOUS
    context_switches: int = 0
    expert_actions: int = 0
    novice_actions: int = 0
    _last: Actor = field(default=Actor.NOVICE, repr=False)
    trace: list = field(default_factory=list, repr=False)

    def begin_episode(self):
        self.mode = Mode.AUTONOMOUS
        self._last = Actor.NOVICE
        self.trace = []

    def record(self, actor, next_mode):
        if actor is not self._last:
            self.context_switches += 1
        if actor is Actor.EXPERT:
            self.expert_actions += 1
        else:
            self.novice_actions += 1
        self._last = actor
        self.mode = next_mode
        self.trace.append(actor)

    def end_episode(self):
        if self._last is not Actor.NOVICE:
            self.context_switches += 1
        self._last = Actor.NOVICE
        self.mode = Mode.AUTONOMOUS
