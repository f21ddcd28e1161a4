import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tubedagger.envs import make_system
from tubedagger.errors import EmptyBatch, ShapeError
from tubedagger.policies import (
    MlpPolicy,
    OptimConfig,
    bce_loss_and_grads,
    default_expert,
    evaluate,
    fit,
    init_mlp,
    load_policy,
    mse_loss_and_grads,
    noisy_action,
    policy_from_dict,
    policy_to_dict,
    save_policy,
    sgd_update,
)
from tubedagger.rng import make_rng


def numeric_grads(loss_of, params, h=1e-5):
    """Central finite differences of a scalar function of a parameter list."""
    out = []
    for i, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[i][idx] += h
            minus[i][idx] -= h
            g[idx] = (loss_of(plus) - loss_of(minus)) / (2 * h)
        out.append(g)
    return out


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n)
        assert np.all(err <= rtol * np.maximum(np.abs(n), np.abs(a)) + atol), err.max()


def random_net(seed, sizes=(3, 5, 4, 2), activation="tanh", output="linear"):
    return init_mlp(sizes, make_rng(seed, "net"), activation, output)


def test_zero_network_outputs_zero():
    net = MlpPolicy((3, 4, 2), (np.zeros((4, 3)), np.zeros((2, 4))), (np.zeros(4), np.zeros(2)))
    np.testing.assert_array_equal(evaluate(net, np.array([1.0, -2.0, 3.0])), np.zeros(2))


def test_single_linear_identity_layer():
    net = MlpPolicy((3, 3), (np.eye(3),), (np.zeros(3),))
    x = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(evaluate(net, x), x)


def test_pendulum_expert_zero_at_upright():
    sys = make_system("inverted_pendulum")
    np.testing.assert_array_equal(evaluate(default_expert(sys), np.zeros(4)), np.zeros(1))


def test_evaluate_dimension_mismatch():
    with pytest.raises(ShapeError):
        evaluate(random_net(0), np.zeros(4))


def test_mlp_shape_validation():
    with pytest.raises(ShapeError):
        MlpPolicy((3, 2), (np.zeros((3, 2)),), (np.zeros(2),))
    with pytest.raises(ValueError):
        MlpPolicy((1, 1), (np.array([[np.nan]]),), (np.zeros(1),))


def test_evaluate_is_pure():
    net = random_net(1)
    x = make_rng(1, "x").standard_normal((7, 3))
    np.testing.assert_array_equal(evaluate(net, x), evaluate(net, x))


def test_noisy_action_zero_variance_is_identity():
    a = np.array([0.3, -0.2])
    out = noisy_action(a, 0.0, make_rng(0, "n"))
    np.testing.assert_array_equal(out, a)
    assert out is not a


def test_noisy_action_moments():
    a = np.array([0.5, -1.0])
    rng = make_rng(0, "noise-moments")
    draws = np.array([noisy_action(a, 0.01, rng) for _ in range(100_000)])
    np.testing.assert_allclose(draws.var(axis=0), 0.01, atol=5e-4)
    assert np.all(np.abs(draws.mean(axis=0) - a) <= 3 * 0.1 / np.sqrt(1e5))


def test_noisy_action_rejects_negative_variance():
    with pytest.raises(ValueError):
        noisy_action(np.zeros(1), -1.0, make_rng(0))


def test_mse_perfect_fit_has_zero_loss_and_grads():
    net = random_net(2)
    x = make_rng(2, "x").standard_normal((6, 3))
    loss, grads = mse_loss_and_grads(net, x, evaluate(net, x))
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_mse_duplicated_batch_is_invariant():
    net = random_net(3)
    rng = make_rng(3, "x")
    x, y = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
    l1, g1 = mse_loss_and_grads(net, x, y)
    l2, g2 = mse_loss_and_grads(net, np.vstack([x, x]), np.vstack([y, y]))
    assert l1 == pytest.approx(l2, rel=1e-14)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_mse_empty_batch():
    with pytest.raises(EmptyBatch):
        mse_loss_and_grads(random_net(0), np.zeros((0, 3)), np.zeros((0, 2)))


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_mse_gradients_match_finite_differences(activation):
    net = random_net(4, activation=activation)
    rng = make_rng(4, "batch")
    x, y = rng.standard_normal((8, 3)), rng.standard_normal((8, 2))
    _, grads = mse_loss_and_grads(net, x, y)
    num = numeric_grads(lambda ps: mse_loss_and_grads(net.with_params(ps), x, y)[0], net.params())
    assert_grads_close(grads, num)


def test_bce_gradients_match_finite_differences():
    net = random_net(5, sizes=(3, 6, 1), output="sigmoid")
    rng = make_rng(5, "batch")
    x = rng.standard_normal((9, 3))
    y = (rng.random(9) < 0.5).astype(float)
    _, grads = bce_loss_and_grads(net, x, y)
    num = numeric_grads(lambda ps: bce_loss_and_grads(net.with_params(ps), x, y)[0], net.params())
    assert_grads_close(grads, num)


def test_bce_at_half_probability_is_ln2():
    net = MlpPolicy((2, 1), (np.zeros((1, 2)),), (np.zeros(1),), output="sigmoid")
    loss, _ = bce_loss_and_grads(net, np.ones((4, 2)), np.array([0.0, 1.0, 1.0, 0.0]))
    assert loss == pytest.approx(np.log(2.0), abs=1e-9)


def test_bce_separable_fit_reaches_low_loss():
    rng = make_rng(6, "sep")
    x = rng.uniform(-1, 1, size=(40, 2))
    x[:, 0] += np.where(x[:, 0] > 0, 0.5, -0.5)
    y = (x[:, 0] > 0).astype(float)
    net = init_mlp((2, 1), make_rng(6, "init"), output="sigmoid")
    net = fit(net, x, y, OptimConfig(lr=0.5, momentum=0.9, epochs=400, batch_size=40), make_rng(6), loss="bce")
    loss, _ = bce_loss_and_grads(net, x, y)
    assert loss < 1e-3


def test_bce_saturated_logits_stay_finite():
    net = MlpPolicy((1, 1), (np.array([[1000.0]]),), (np.zeros(1),), output="sigmoid")
    loss, grads = bce_loss_and_grads(net, np.array([[1.0], [-1.0]]), np.array([0.0, 1.0]))
    assert np.isfinite(loss) and loss == pytest.approx(1000.0)
    assert all(np.all(np.isfinite(g)) for g in grads)


def test_bce_requires_sigmoid_head():
    with pytest.raises(ShapeError):
        bce_loss_and_grads(random_net(0), np.zeros((1, 3)), np.zeros(1))


def test_sgd_zero_grads_and_zero_lr_are_fixed_points():
    net = random_net(7)
    zero = [np.zeros_like(p) for p in net.params()]
    same, _ = sgd_update(net, zero, lr=0.1)
    for a, b in zip(same.params(), net.params()):
        np.testing.assert_array_equal(a, b)
    grads = [np.ones_like(p) for p in net.params()]
    same, _ = sgd_update(net, grads, lr=0.0)
    for a, b in zip(same.params(), net.params()):
        np.testing.assert_array_equal(a, b)


def test_sgd_on_scalar_quadratic_decreases_loss():
    # f(w) = w^2, grad 2w: stable for lr < 1
    net = MlpPolicy((1, 1), (np.array([[3.0]]),), (np.zeros(1),))
    losses = []
    for _ in range(20):
        w = net.weights[0][0, 0]
        losses.append(w * w)
        net, _ = sgd_update(net, [np.array([[2 * w]]), np.zeros(1)], lr=0.1)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_fit_with_zero_epochs_returns_same_policy():
    net = random_net(8)
    x, y = np.ones((3, 3)), np.ones((3, 2))
    assert fit(net, x, y, OptimConfig(epochs=0), make_rng(0)) is net


def test_fit_is_deterministic_given_rng_stream():
    net = random_net(9)
    rng = make_rng(9, "data")
    x, y = rng.standard_normal((50, 3)), rng.standard_normal((50, 2))
    a = fit(net, x, y, OptimConfig(epochs=3), make_rng(1, "mb"))
    b = fit(net, x, y, OptimConfig(epochs=3), make_rng(1, "mb"))
    for p, q in zip(a.params(), b.params()):
        np.testing.assert_array_equal(p, q)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net = random_net(10, output="sigmoid", sizes=(3, 4, 1))
    path = tmp_path / "p.json"
    save_policy(path, net)
    back = load_policy(path)
    assert back.layer_sizes == net.layer_sizes and back.output == "sigmoid"
    for p, q in zip(back.params(), net.params()):
        np.testing.assert_array_equal(p, q)
    assert policy_to_dict(policy_from_dict(policy_to_dict(net))) == policy_to_dict(net)


@given(seed=st.integers(0, 10_000))
def test_gradient_property_random_networks(seed):
    rng = make_rng(seed, "prop")
    sizes = (int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 3)))
    net = init_mlp(sizes, rng, activation="tanh")
    x, y = rng.standard_normal((4, sizes[0])), rng.standard_normal((4, sizes[-1]))
    _, grads = mse_loss_and_grads(net, x, y)
    num = numeric_grads(lambda ps: mse_loss_and_grads(net.with_params(ps), x, y)[0], net.params())
    assert_grads_close(grads, num)
