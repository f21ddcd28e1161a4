import numpy as np
import pytest

from tubedagger.dagger import (
    METRICS_COLUMNS,
    Dataset,
    MetricsRecord,
    TrainConfig,
    behavioral_cloning,
    context_switches_until_solved,
    ensembledagger_train,
    evaluate_policy,
    first_solved_episode,
    lazydagger_train,
    read_metrics_csv,
    tubedagger_train,
    validate_metrics,
    write_metrics_csv,
)
from tubedagger.envs import make_system
from tubedagger.errors import ConfigError, InsufficientEnsemble, ShapeError
from tubedagger.gating import DoubtGateConfig, TubeGateConfig
from tubedagger.policies import OptimConfig, default_doubt, default_expert, default_novice, evaluate, fit
from tubedagger.reachtube import TubeConfig, build_tube
from tubedagger.rng import make_rng

FAST = OptimConfig(lr=1e-2, epochs=5)


@pytest.fixture(scope="module")
def vdp():
    system = make_system("vanderpol").with_horizon(60)
    expert = default_expert(system)
    return system, expert, build_tube(system, expert, TubeConfig(batch_size=128), rng_seed=1)


def _rec(ep, switches, solved, pct=50.0, size=0):
    return MetricsRecord(ep, 0.0, 0.0, 0.0, switches, size, pct, size, solved)


# --- bookkeeping ---------------------------------------------------------------------------

def test_dataset_append_only_and_shapes():
    d = Dataset(2, 1)
    d.add(np.zeros(2), np.ones(1))
    d.extend(np.ones((3, 2)), np.zeros((3, 1)))
    assert len(d) == 4 and d.states.shape == (4, 2) and d.actions.shape == (4, 1)
    with pytest.raises(ShapeError):
        d.add(np.zeros(3), np.ones(1))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(episodes=0)
    with pytest.raises(ConfigError):
        TrainConfig(eval_episodes=0)
    with pytest.raises(ConfigError):
        TrainConfig(sigma2=-1.0)
    assert TrainConfig().replace(seed=4).seed == 4


def test_switches_until_solved():
    assert context_switches_until_solved([_rec(0, 0, True)]) == (0, True)
    series = [_rec(0, 2, False), _rec(1, 6, True), _rec(2, 8, True)]
    assert context_switches_until_solved(series) == (6, True)
    assert first_solved_episode(series) == 1
    assert context_switches_until_solved(series[:1]) == (2, False)
    assert first_solved_episode(series[:1]) is None
    with pytest.raises(ValueError):
        context_switches_until_solved([])


def test_validate_metrics_rejects_broken_series():
    validate_metrics([_rec(0, 1, False), _rec(1, 1, True)])
    with pytest.raises(ValueError):
        validate_metrics([_rec(0, 3, False), _rec(1, 1, False)])
    with pytest.raises(ValueError):
        validate_metrics([_rec(0, 1, True), _rec(1, 1, False)])
    with pytest.raises(ValueError):
        validate_metrics([_rec(0, 1, False, pct=101.0)])


def test_metrics_csv_round_trip(tmp_path):
    series = [MetricsRecord(0, 12.5, 0.1, 1e-17, 2, 30, 97.0, 30, False),
              MetricsRecord(1, 1000.0, 0.0, 999.0, 2, 30, 100.0, 30, True)]
    path = tmp_path / "m.csv"
    write_metrics_csv(path, series)
    assert path.read_text().splitlines()[0] == ",".join(METRICS_COLUMNS)
    assert read_metrics_csv(path) == series


def test_expert_scores_full_reward_on_pendulum(pendulum):
    system, expert, _ = pendulum
    assert evaluate_policy(system, expert, 5, seed=0) == (1000.0, 0.0)


def test_single_evaluation_episode_has_zero_spread(vdp):
    system, expert, _ = vdp
    assert evaluate_policy(system, expert, 1, seed=3)[1] == 0.0


# --- TubeDAgger -------------------------------------------------------------------------------

def test_tubedagger_dataset_grows_by_expert_steps(vdp):
    system, expert, tube = vdp
    cfg = TrainConfig(episodes=4, optim=FAST, seed=2, gate=TubeGateConfig(0.2, 0.7))
    _, metrics = tubedagger_train(system, expert, default_novice(system, make_rng(2)), tube, cfg)
    validate_metrics(metrics)
    for rec in metrics:
        assert rec.dataset_size == rec.expert_actions_cum
    steps = [100 - r.novice_action_pct for r in metrics]
    assert all(0 <= s <= 100 for s in steps)


def test_tubedagger_zero_thresholds_is_behavioural_cloning(vdp):
    system, expert, tube = vdp
    cfg = TrainConfig(episodes=3, optim=FAST, gate=TubeGateConfig(0.0, 0.0))
    _, metrics = tubedagger_train(system, expert, default_novice(system, make_rng(0)), tube, cfg)
    # step 0 starts on the start-ball boundary, so the expert acts from the first step on
    assert [r.novice_action_pct for r in metrics] == [0.0, 0.0, 0.0]
    assert [r.dataset_size for r in metrics] == [60, 120, 180]
    assert [r.context_switches_cum for r in metrics] == [2, 4, 6]


def test_tubedagger_is_deterministic(vdp):
    system, expert, tube = vdp
    cfg = TrainConfig(episodes=2, optim=FAST, seed=5)
    a = tubedagger_train(system, expert, default_novice(system, make_rng(5)), tube, cfg)
    b = tubedagger_train(system, expert, default_novice(system, make_rng(5)), tube, cfg)
    assert a[1] == b[1]
    np.testing.assert_array_equal(a[0].params()[0], b[0].params()[0])


def test_tube_mismatch_is_rejected(vdp, pendulum):
    system, expert, tube = vdp
    novice = default_novice(system, make_rng(0))
    with pytest.raises(ConfigError):
        tubedagger_train(system, expert, novice, tube, TrainConfig(episodes=1, horizon=200))
    with pytest.raises(ConfigError):
        tubedagger_train(system, expert, novice, pendulum[2], TrainConfig(episodes=1))
    with pytest.raises(ConfigError):
        tubedagger_train(system, expert, novice, tube, TrainConfig(episodes=1, gate=DoubtGateConfig()))


def test_pendulum_collection_stays_safe(pendulum):
    system, expert, tube = pendulum
    cfg = TrainConfig(episodes=3, optim=OptimConfig(lr=1e-2), seed=0, gate=TubeGateConfig(0.2, 0.7))
    _, metrics = tubedagger_train(system, expert, default_novice(system, make_rng(0, "init")), tube, cfg)
    assert all(r.combined_reward >= 0.95 * system.solved_threshold for r in metrics)


# --- baselines ------------------------------------------------------------------------------

def test_lazydagger_runs_and_rejects_bad_gate(vdp):
    system, expert, _ = vdp
    cfg = TrainConfig(episodes=3, optim=FAST, gate=DoubtGateConfig(0.1, 0.5))
    novice, doubt, metrics = lazydagger_train(
        system, expert, default_novice(system, make_rng(0)), default_doubt(system, make_rng(1)), cfg
    )
    validate_metrics(metrics)
    assert all(r.dataset_size == r.expert_actions_cum for r in metrics)
    assert np.all((evaluate(doubt, np.zeros((4, 2))) >= 0) & (evaluate(doubt, np.zeros((4, 2))) <= 1))
    with pytest.raises(ConfigError):
        lazydagger_train(system, expert, novice, doubt, cfg.replace(gate=TubeGateConfig()))


def test_doubt_model_learns_separable_labels():
    rng = make_rng(7, "sep")
    states = rng.uniform(-1, 1, (400, 2))
    labels = (states @ np.array([1.0, -2.0]) > 0.1).astype(float)
    system = make_system("vanderpol")
    doubt = default_doubt(system, make_rng(8))
    doubt = fit(doubt, states, labels, OptimConfig(lr=0.05, epochs=100, batch_size=32), make_rng(9), loss="bce")
    test = rng.uniform(-1, 1, (1000, 2))
    truth = test @ np.array([1.0, -2.0]) > 0.1
    acc = np.mean((evaluate(doubt, test)[:, 0] > 0.5) == truth)
    assert acc >= 0.95


def test_ensemble_preconditions_and_zero_variance_flag(vdp):
    system, expert, _ = vdp
    member = default_novice(system, make_rng(0))
    cfg = TrainConfig(episodes=2, optim=FAST)
    with pytest.raises(InsufficientEnsemble):
        ensembledagger_train(system, expert, [member], cfg)
    members, metrics = ensembledagger_train(system, expert, [member] * 3, cfg)
    assert all("zero_variance" in r.flags for r in metrics)
    assert all(r.expert_actions_cum == 0 and r.context_switches_cum == 0 for r in metrics)
    assert len(members) == 3


def test_ensemble_with_distinct_members_calls_expert(vdp):
    system, expert, _ = vdp
    members = [default_novice(system, make_rng(0, "init", i)) for i in range(5)]
    cfg = TrainConfig(episodes=2, optim=FAST, gate=DoubtGateConfig(0.0, 1e-9))
    _, metrics = ensembledagger_train(system, expert, members, cfg)
    validate_metrics(metrics)
    assert metrics[0].expert_actions_cum > 0
    assert metrics[0].dataset_size == metrics[0].expert_actions_cum


def test_behavioral_cloning_bookkeeping(vdp):
    system, expert, _ = vdp
    novice = default_novice(system, make_rng(0))
    out, (rec,) = behavioral_cloning(system, expert, novice, 3, TrainConfig(optim=FAST))
    assert rec.dataset_size == 3 * system.horizon
    assert rec.context_switches_cum == 0 and rec.novice_action_pct == 0.0
    same, _ = behavioral_cloning(system, expert, novice, 1, TrainConfig(optim=OptimConfig(epochs=0)))
    assert same is novice
    with pytest.raises(ValueError):
        behavioral_cloning(system, expert, novice, 0, TrainConfig())
