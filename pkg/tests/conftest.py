import numpy as np
import pytest

from mfirl.core import MeanField, TabularEnv
from mfirl.envs import build_env, build_random_env
from mfirl.solver import solve_contexts


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_env():
    """2 states, 2 actions, T=2, contexts (0, 1), mean-field coupled."""
    return build_random_env(np.random.default_rng(1), num_states=2, num_actions=2, horizon=2)


@pytest.fixture
def make_identity_env():
    """Factory for envs whose agents never move: P(s'|s, a, mu) = 1{s' = s}."""
    def make(num_states=2, num_actions=2, horizon=2, reward=None, contexts=(0.0,)):
        table = np.zeros((num_states, num_actions)) if reward is None else np.asarray(reward, dtype=float)
        eye = np.eye(num_states)
        kernel = np.repeat(eye[:, None, :], num_actions, axis=1)
        return TabularEnv(
            name="identity", num_states=num_states, num_actions=num_actions, contexts=contexts,
            horizon=horizon, initial_mean_field=MeanField.uniform(num_states),
            reward=lambda s, a, mu, m: float(table[s, a]),
            transition=lambda s, a, mu: eye[s].copy(),
            kernel_fn=lambda mu: kernel, reward_table_fn=lambda mu, m: table,
        )
    return make


@pytest.fixture(scope="session")
def virus_env():
    return build_env("virus", 50)


@pytest.fixture(scope="session")
def virus_equilibria(virus_env):
    return solve_contexts(virus_env, tol=1e-10, max_iter=10000)
