import numpy as np
import pytest

from dropsynth.networks import GanConfig
from dropsynth.procedural import generate_corpus


@pytest.fixture
def small_cfg():
    return GanConfig(latent_dim=16, channels=(16, 16, 16, 16), max_stage=4)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Small procedural corpus shared across tests."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = generate_corpus(
        root, {"train": 24, "val": 10, "test": 10}, size=32, seed=5
    )
    return manifest
