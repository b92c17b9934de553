"""Pytest configuration and shared fixtures."""

import numpy as np
import pytest

from armfleet.core.policy import MlpSpec, init_params
from armfleet.core.ppo import PpoConfig
from armfleet.core.reacher_env import get_env_spec
from armfleet.core.rollout import RolloutBatch


@pytest.fixture(scope="session")
def scara_spec():
    """SCARA reacher with a short horizon so episodes stay cheap."""
    return get_env_spec("scara3", 16)


@pytest.fixture
def tiny_config():
    """PPO config small enough for a round to finish in well under a second."""
    return PpoConfig(
        horizon=16,
        timesteps_per_batch=32,
        min_steps_per_task=16,
        sgd_batchsize=16,
        num_sgd_iter=2,
        hidden_sizes=(8,),
    )


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config):
    """The tiny config written as YAML."""
    path = tmp_path / "ppo.yaml"
    path.write_text(tiny_config.to_yaml(), encoding="utf-8")
    return path


@pytest.fixture
def tiny_params(scara_spec, tiny_config):
    """Initial parameters matching the tiny config on the SCARA task."""
    spec = MlpSpec(scara_spec.observation_dim, scara_spec.action_dim, tiny_config.hidden_sizes)
    return init_params(spec, seed=0)


@pytest.fixture
def make_rollout():
    """Build a consistent RolloutBatch from per-step rewards and episode ends."""

    def _make(rewards, boundaries, values=None, obs_dim=9, action_dim=3):
        n = len(rewards)
        dones = np.zeros(n, dtype=np.bool_)
        dones[np.asarray(boundaries, dtype=np.intp) - 1] = True
        return RolloutBatch(
            observations=np.zeros((n, obs_dim)),
            actions=np.zeros((n, action_dim)),
            log_probs=np.zeros(n),
            rewards=np.asarray(rewards, dtype=np.float64),
            values=np.zeros(n) if values is None else np.asarray(values, dtype=np.float64),
            dones=dones,
            episode_boundaries=tuple(boundaries),
        )

    return _make
