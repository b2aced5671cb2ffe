import time

import numpy as np
import pytest

from relhallu.datasets import Normalizer, make_synthetic2d, split_chrono
from relhallu.diffusion import DiffusionModel, build_model, make_linear_schedule, train_diffusion
from relhallu.nn import TrainConfig, init_mlp

ACCEPTANCE_LINES = []


class ConstNet:
    """Noise predictor returning a fixed vector (zero by default)."""

    def __init__(self, dim, value=0.0):
        self.data_dim = dim
        self.value = np.broadcast_to(np.asarray(value, dtype=np.float64), (dim,))

    def forward(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(self.value, x.shape).copy()


class FnNet:
    """Noise predictor defined by an arbitrary ``fn(x, t)``."""

    def __init__(self, dim, fn):
        self.data_dim = dim
        self.fn = fn

    def forward(self, x, t):
        return self.fn(np.asarray(x, dtype=np.float64), np.asarray(t))


def stub_model(net, dim=None, schedule=None, normalizer=None, trained=True):
    dim = dim or net.data_dim
    return DiffusionModel(net, schedule or make_linear_schedule(), normalizer, dim, trained=trained)


def random_model(dim=6, n_vars=3, seed=0, hidden=(8, 8), T=20):
    """Small untrained-but-usable model with a random normalizer."""
    rng = np.random.default_rng(seed)
    L = dim // n_vars
    norm = Normalizer(rng.uniform(-1, 1, n_vars), rng.uniform(0.5, 2.0, n_vars), L)
    net = init_mlp(dim, hidden, time_dim=4, seed=seed, dtype=np.float64)
    return DiffusionModel(net, make_linear_schedule(T), norm, dim, trained=True)


@pytest.fixture(scope="session")
def toy_model():
    """DM trained on 500 synthetic2d points (sin manifold); returns (model, train seconds)."""
    ds = make_synthetic2d(500, 0.05, seed=0)
    sp = split_chrono(len(ds))
    train, val = ds.windows[slice(*sp.train)], ds.windows[slice(*sp.val)]
    norm = Normalizer.fit(train, 2, 1)
    cfg = TrainConfig(
        batch_size=128, max_epochs=15000, patience=10**6, val_interval=10, val_draws=64, hidden=(256,) * 5
    )
    model = build_model(2, cfg, normalizer=norm)
    t0 = time.perf_counter()
    train_diffusion(model, norm.normalize(train), norm.normalize(val), cfg)
    return model, time.perf_counter() - t0


@pytest.fixture
def zero_model():
    return stub_model(ConstNet(4))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
