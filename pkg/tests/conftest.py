import numpy as np
import pytest
import torch

from ending import data as D
from ending.protocol import build_task


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiment tests")


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_index():
    """40 images, 4 classes, 64px; session-scoped since generation is pure."""
    return D.generate_synthetic_dataset(seed=7, n_fg_classes=4, n_images=40, size=64)


@pytest.fixture(scope="session")
def task_2_2():
    return build_task("2-2", 4, "overlapped")


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
