import json

import numpy as np
import pytest

from src.core.nnkit import Rng
from src.layers.data import Dataset, Task, TaskStream, synthetic_task
from src.layers.lifelong import TrainConfig

DIM = 16


def make_task(name: str, kind: str, seed: int, n_train: int = 40, n_test: int = 12) -> Task:
    rng = Rng(seed)
    train = synthetic_task(kind, n_train, DIM, rng.fork('train'))
    test = synthetic_task(kind, n_test, DIM, rng.fork('test'))
    return Task(name, Dataset(train.data, None, name, train.image_shape),
                Dataset(test.data, None, f"{name}-test", test.image_shape))


@pytest.fixture
def tiny_cfg():
    return TrainConfig(epochs=2, batch_size=16, lr=1e-3, latent_dim=2, hidden_dim=8,
                       probe_size=20, tau=40.0, hier_latent_dims=[3, 2])


@pytest.fixture
def two_task_stream():
    return TaskStream([make_task('top', 'half-active-top', 1), make_task('bottom', 'half-active-bottom', 2)])


@pytest.fixture
def three_task_stream():
    return TaskStream([make_task('top', 'half-active-top', 1), make_task('bottom', 'half-active-bottom', 2),
                       make_task('bars', 'bars', 3)])


@pytest.fixture
def tiny_config_text():
    def build(mode: str = 'degm', **extra) -> str:
        data = {
            'mode': mode,
            'tasks': [
                {'name': 'top', 'kind': 'half-active-top', 'dim': DIM, 'n_train': 32, 'n_test': 8},
                {'name': 'bottom', 'kind': 'half-active-bottom', 'dim': DIM, 'n_train': 32, 'n_test': 8},
            ],
            'train': {'epochs': 2, 'batch_size': 16, 'lr': 0.001, 'latent_dim': 2, 'hidden_dim': 8,
                      'probe_size': 16, 'hier_latent_dims': [3, 2]},
            'bounds': {'sample_size': 16, 'aux_epochs': 1},
        }
        data.update(extra)
        return json.dumps(data)
    return build


@pytest.fixture
def binary_batch():
    return (np.random.default_rng(0).random((5, DIM)) > 0.5).astype(np.float64)
