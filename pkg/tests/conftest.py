import time
from types import SimpleNamespace

import numpy as np
import pytest

from qdmf.diffusion import gaussian_mixture, make_schedule, train_teacher

# shared toy setup: 8-mode ring, T = 100 linear schedule
T, BETA_START, BETA_END = 100, 1e-4, 0.1
TEACHER_EPOCHS = 150


@pytest.fixture(scope="session")
def schedule():
    return make_schedule(T, BETA_START, BETA_END)


@pytest.fixture(scope="session")
def trained(schedule):
    """Full-precision teacher on 10k mixture points, plus its per-epoch loss log."""
    data = gaussian_mixture(10000, seed=1)
    losses: list = []
    start = time.perf_counter()
    teacher = train_teacher(data, schedule, epochs=TEACHER_EPOCHS, seed=0, loss_log=losses)
    return SimpleNamespace(teacher=teacher, data=data, losses=losses,
                           seconds=time.perf_counter() - start, heldout=gaussian_mixture(1000, seed=2))


@pytest.fixture(scope="session")
def teacher(trained):
    return trained.teacher


@pytest.fixture
def rng():
    return np.random.default_rng(0)
