"""Pytest configuration and fixtures."""

import os

import numpy as np
import pytest

from dvm_marl.config.experiment_config import AlgoConfig
from dvm_marl.core.models import Algorithm
from dvm_marl.core.tensor_core import one_hot
from dvm_marl.services.particle_envs import CONTINUOUS_ACTION_DIM, NUM_DISCRETE_ACTIONS
from dvm_marl.services.replay import TransitionBatch


@pytest.fixture(scope="session", autouse=True)
def setup_test_env():
    """Set up test environment variables."""
    os.environ.setdefault("DVM_SEED_OFFSET", "0")
    os.environ.setdefault("DVM_LOG_LEVEL", "WARNING")
    os.environ.setdefault("DVM_RECORD_WALL_CLOCK", "false")

    from dvm_marl.config.settings import reload_settings

    reload_settings()

    yield


@pytest.fixture
def rng():
    """Seeded generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_maddpg():
    """MADDPG settings with width-8 networks."""
    return AlgoConfig(hidden_sizes=(8, 8), batch_size=16)


@pytest.fixture
def tiny_masac():
    """MA-SAC settings with width-8 networks."""
    return AlgoConfig(algorithm=Algorithm.MASAC, hidden_sizes=(8, 8), batch_size=16)


def random_batch(
    rng: np.random.Generator,
    num_agents: int,
    obs_dim: int,
    discrete: bool,
    size: int,
    done_fraction: float = 0.2,
) -> TransitionBatch:
    """Random joint transitions with valid action encodings."""
    if discrete:
        indices = rng.integers(NUM_DISCRETE_ACTIONS, size=(size, num_agents))
        actions = one_hot(indices, NUM_DISCRETE_ACTIONS)
    else:
        actions = rng.uniform(-0.9, 0.9, size=(size, num_agents, CONTINUOUS_ACTION_DIM))
    return TransitionBatch(
        obs=rng.normal(size=(size, num_agents, obs_dim)),
        actions=actions,
        rewards=rng.normal(size=size),
        next_obs=rng.normal(size=(size, num_agents, obs_dim)),
        dones=(rng.uniform(size=size) < done_fraction).astype(np.float64),
    )


@pytest.fixture
def make_batch():
    """Factory for random joint transition batches."""
    return random_batch
