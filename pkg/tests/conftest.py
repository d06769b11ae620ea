import numpy as np
import pytest

from pwlsi import CovMatrix, VaeModel, assemble_detector, train
from pwlsi.vae import TrainConfig


def train_quick(n, m, epochs, seed, conv=False):
    model = VaeModel.init(n, m=m, seed=seed, conv=conv)
    rng = np.random.default_rng(seed + 1)
    data = rng.standard_normal((400, n))
    return train(model, data, TrainConfig(epochs=epochs, batch_size=64, seed=seed + 2))


@pytest.fixture(scope="session")
def mlp16():
    return train_quick(16, 3, epochs=40, seed=11)


@pytest.fixture(scope="session")
def mlp64():
    return train_quick(64, 10, epochs=60, seed=7)


@pytest.fixture(scope="session")
def graph16(mlp16):
    return assemble_detector(mlp16, lam=1.2, filter_window=1)


@pytest.fixture(scope="session")
def graph64(mlp64):
    return assemble_detector(mlp64, lam=1.2, filter_window=1)


@pytest.fixture(scope="session")
def cov16():
    return CovMatrix.identity(16)


@pytest.fixture(scope="session")
def cov64():
    return CovMatrix.identity(64)
