import time
from dataclasses import dataclass

import numpy as np
import pytest

from podiff.denoiser import ModelDenoiser, TrainConfig, init_model, train
from podiff.env import (EnvState, condition_vector, encode_history, generate_dataset,
                        grid_sensor_net, observe, sensor_net_2x2)


@dataclass
class Trained:
    spec: object
    dataset: object
    model: object
    fn: ModelDenoiser
    loss_curve: list
    train_seconds: float


def _train(spec, episodes, width, seed=0, **cfg):
    ds = generate_dataset(spec, episodes, 1, np.random.default_rng(seed))
    model = init_model(spec.cond_dim(1), spec.state_dim, width, 6, rng=seed)
    t0 = time.perf_counter()
    res = train(model, ds, TrainConfig(seed=seed, **cfg))
    return Trained(spec, ds, res.model, ModelDenoiser(res.model), res.loss_curve,
                   time.perf_counter() - t0)


@pytest.fixture(scope="session")
def trained22():
    """Width-256 denoiser on the CO 2x2 instance, default training config."""
    return _train(sensor_net_2x2(True), episodes=50, width=256)


@pytest.fixture(scope="session")
def trained33():
    """Under-parameterised width-64 denoiser on the 3x3 two-target network."""
    return _train(grid_sensor_net(3, 3, 2), episodes=100, width=64, learning_rate=1e-3)


@pytest.fixture(scope="session")
def co22():
    return sensor_net_2x2(True)


@pytest.fixture(scope="session")
def nonco22():
    return sensor_net_2x2(False)


def joint_conditions(spec, target_areas, seed=0):
    """Conditioning vectors of every agent for one observation of a state."""
    obs = observe(spec, EnvState(tuple(target_areas)), np.random.default_rng(seed))
    return [condition_vector(i, encode_history(spec, i, [obs[i]], []), spec.n_agents)
            for i in range(spec.n_agents)]


def cond_of(spec, agent, obs):
    return condition_vector(agent, np.asarray(obs, dtype=float), spec.n_agents)
