import pytest
import torch

import app  # noqa: F401  (pins float64)
from app.models.mixture import get_preset
from app.schemas.config import MlpSpec, NetworkConfig, RunConfig, TrainConfig
from app.services import network_service


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def ring8():
    return get_preset("ring8")


@pytest.fixture
def gm1d2():
    return get_preset("gm1d2")


@pytest.fixture
def small_d_spec():
    return MlpSpec(in_dim=2, hidden=(16, 16), time_embed_dim=8, time_max_frequency=4.0, out_dim=1,
                   scalar_output=True)


@pytest.fixture
def small_g_spec():
    return MlpSpec(in_dim=2, hidden=(16, 16), time_embed_dim=8, time_max_frequency=4.0, out_dim=2)


@pytest.fixture
def random_d(small_d_spec, rng):
    return network_service.init(small_d_spec, rng, zero_head=False)


def tiny_network() -> NetworkConfig:
    return NetworkConfig(hidden=[16, 16], time_embed_dim=8, time_max_frequency=4.0, class_embed_dim=4)


@pytest.fixture
def tiny_run_config():
    """A fast run over the 1-D two-component mixture; tests override fields as needed."""

    def make(**train_overrides) -> RunConfig:
        train = dict(
            objective="fm",
            dataset="gm1d2",
            g_lr=1e-3,
            d_lr=1e-3,
            batch=32,
            total_steps=20,
            n_disc=2,
            generator=tiny_network(),
            discriminator=tiny_network(),
        )
        train.update(train_overrides)
        return RunConfig(
            name="tiny",
            train=TrainConfig(**train),
            sampler={"steps": 8},
            eval_every=10,
            eval_samples=64,
            eval_t_draws=4,
            eval_x_per_t=16,
        )

    return make
