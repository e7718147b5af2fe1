import pytest

from shufflecam import harness
from shufflecam.config import RunConfig, with_overrides

# small, fast-learning setup shared by the model-level tests
TOY = {
    "dataset.synth.num_samples": 60,
    "training.epochs": 3,
    "training.lr": 2e-3,
    "model.widths": (8, 16, 32),
}


@pytest.fixture(scope="session")
def toy_cfg():
    return with_overrides(RunConfig(), TOY)


@pytest.fixture(scope="session")
def toy_data(toy_cfg):
    return harness.build_split(toy_cfg)


@pytest.fixture(scope="session")
def toy_model(toy_cfg, toy_data):
    return harness.train(toy_cfg, toy_data)
