import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tubedagger.envs import SystemSpec

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_decay_system(dim=1, dt=0.1, horizon=10, x0=None, start_radius=0.1):
    """x' = -x + u with wide action bounds: closed-form flow for oracles."""
    return SystemSpec(
        id="decay",
        state_dim=dim,
        action_dim=dim,
        dt=dt,
        horizon=horizon,
        action_low=-100.0 * np.ones(dim),
        action_high=100.0 * np.ones(dim),
        x0=np.ones(dim) if x0 is None else x0,
        start_radius=start_radius,
        solved_threshold=0.0,
        dynamics=lambda x, u: -x + u,
        failure_fn=lambda x: np.zeros(np.shape(x)[:-1], dtype=bool) if np.ndim(x) > 1 else False,
        reward_fn=lambda x, u, xn: -np.sum(np.square(xn), axis=-1),
    )


def zero_policy(dim=1):
    return lambda x: np.zeros(np.shape(x)[:-1] + (dim,))


@pytest.fixture
def decay():
    return make_decay_system()


@pytest.fixture(scope="session")
def pendulum():
    from tubedagger.envs import make_system
    from tubedagger.policies import default_expert
    from tubedagger.reachtube import TubeConfig, build_tube

    system = make_system("inverted_pendulum")
    expert = default_expert(system)
    return system, expert, build_tube(system, expert, TubeConfig(), rng_seed=0)
