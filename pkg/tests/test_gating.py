import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tubedagger.errors import ConfigError, InsufficientEnsemble
from tubedagger.gating import (
    Actor,
    DoubtGateConfig,
    GateState,
    Mode,
    TubeGateConfig,
    count_switches,
    doubt_gate,
    ensemble_variance,
    hysteresis_gate,
    make_doubt_labels,
    tube_gate,
)
from tubedagger.policies import MlpPolicy, fit, init_mlp, OptimConfig, evaluate
from tubedagger.rng import make_rng

A, S = Mode.AUTONOMOUS, Mode.SUPERVISOR
TUBE = TubeGateConfig(0.2, 0.7)
DOUBT = DoubtGateConfig(0.1, 0.5)


@pytest.mark.parametrize(
    "rho, mode, expected",
    [
        (0.5, A, (Actor.NOVICE, A)),
        (0.8, A, (Actor.EXPERT, S)),
        (0.1, S, (Actor.EXPERT, A)),
        (0.5, S, (Actor.EXPERT, S)),
        (0.7, A, (Actor.NOVICE, A)),  # tie at the upper threshold keeps the novice
        (0.2, S, (Actor.EXPERT, S)),  # tie at the lower threshold keeps the supervisor
        (3.0, S, (Actor.EXPERT, S)),
    ],
)
def test_tube_gate_table(rho, mode, expected):
    assert tube_gate(rho, mode, TUBE) == expected


@pytest.mark.parametrize(
    "p, mode, expected",
    [(0.05, A, (Actor.NOVICE, A)), (0.6, A, (Actor.EXPERT, S)), (0.3, S, (Actor.EXPERT, S)), (0.05, S, (Actor.EXPERT, A))],
)
def test_doubt_gate_table(p, mode, expected):
    assert doubt_gate(p, mode, DOUBT) == expected


def test_gate_input_checks():
    with pytest.raises(ValueError):
        tube_gate(-0.1, A, TUBE)
    with pytest.raises(ValueError):
        doubt_gate(float("nan"), A, DOUBT)
    with pytest.raises(ConfigError):
        TubeGateConfig(0.8, 0.7)
    with pytest.raises(ConfigError):
        TubeGateConfig(-0.1, 0.7)
    with pytest.raises(ConfigError):
        DoubtGateConfig(0.6, 0.5)


def _reference_gate(signal, mode, low, high):
    # literal transcription of the per-step branch
    if mode == S or signal > high:
        actor = Actor.EXPERT
        nxt = A if signal < low else S
    else:
        actor, nxt = Actor.NOVICE, A
    return actor, nxt


def test_gate_purity_exhaustive():
    grid = np.round(np.linspace(0.0, 1.2, 121), 10)
    for low, high in [(0.2, 0.7), (0.0, 0.0), (0.5, 0.5), (0.1, 1.0)]:
        cfg = TubeGateConfig(low, high)
        for rho, mode in itertools.product(grid, (A, S)):
            first = tube_gate(rho, mode, cfg)
            assert first == tube_gate(rho, mode, cfg)
            assert first == _reference_gate(rho, mode, low, high)


@given(
    first=st.floats(0.0, 2.0),
    inside=st.lists(st.floats(0.2, 0.7, exclude_min=True, exclude_max=True), min_size=1, max_size=50),
    start=st.sampled_from([A, S]),
)
def test_no_chatter_inside_band(first, inside, start):
    mode = start
    modes = []
    for sig in [first] + inside:
        _, mode = tube_gate(sig, mode, TUBE)
        modes.append(mode)
    assert count_switches(modes[1:]) == 0
    assert count_switches(modes) <= 1


@given(signals=st.lists(st.floats(0.001, 5.0), min_size=1, max_size=30))
def test_zero_thresholds_never_release(signals):
    cfg = TubeGateConfig(0.0, 0.0)
    mode = A
    for sig in signals:
        actor, mode = tube_gate(sig, mode, cfg)
        assert actor is Actor.EXPERT and mode is S


def test_count_switches_recount():
    assert count_switches([A, S, A, S]) == 3
    assert count_switches([]) == 0
    assert count_switches(["x", "x", "y"]) == 1


def test_gate_state_pads_episode_boundaries():
    gs = GateState()
    gs.begin_episode()
    for actor, mode in [(Actor.NOVICE, A), (Actor.EXPERT, S), (Actor.NOVICE, A), (Actor.EXPERT, S)]:
        gs.record(actor, mode)
    gs.end_episode()
    # A,S,A,S inside one episode, plus the forced return to autonomy at the end
    assert gs.context_switches == 4
    assert (gs.expert_actions, gs.novice_actions) == (2, 2)


@given(actors=st.lists(st.sampled_from([Actor.NOVICE, Actor.EXPERT]), min_size=1, max_size=40))
def test_gate_state_matches_padded_recount(actors):
    gs = GateState()
    gs.begin_episode()
    for a in actors:
        gs.record(a, S if a is Actor.EXPERT else A)
    gs.end_episode()
    assert gs.context_switches == count_switches([Actor.NOVICE, *actors, Actor.NOVICE])
    assert gs.expert_actions + gs.novice_actions == len(actors)


def _const_policy(value, dim=2):
    pol = init_mlp((dim, 4, 1), make_rng(0))
    flat = [np.zeros_like(p) for p in pol.params()]
    flat[-1] = np.full_like(flat[-1], value)
    return pol.with_params(flat)


def test_ensemble_variance_values():
    x = np.zeros(2)
    assert ensemble_variance([_const_policy(1.0), _const_policy(-1.0)], x) == pytest.approx(1.0)
    same = [_const_policy(0.3)] * 3
    assert ensemble_variance(same, x) == 0.0
    members = [_const_policy(v) for v in (0.0, 1.0, 5.0)]
    assert ensemble_variance(members, x) == pytest.approx(ensemble_variance(members[::-1], x))
    with pytest.raises(InsufficientEnsemble):
        ensemble_variance(members[:1], x)


def test_doubt_labels_strict_safety():
    nov = np.array([[0.0], [1.0], [0.5], [0.0]])
    exp = np.array([[0.0], [0.0], [0.0], [0.49]])
    np.testing.assert_array_equal(make_doubt_labels(nov, exp, 0.5), [0, 1, 1, 0])


def test_all_unsafe_labels_train_toward_one():
    rng = make_rng(1, "pts")
    states = rng.uniform(-1, 1, (10, 2))
    labels = np.ones((10, 1))
    doubt = init_mlp((2, 16, 1), make_rng(2), output="sigmoid")
    doubt = fit(doubt, states, labels, OptimConfig(lr=0.1, epochs=200, batch_size=10), make_rng(3), loss="bce")
    assert np.all(evaluate(doubt, states) > 0.9)
