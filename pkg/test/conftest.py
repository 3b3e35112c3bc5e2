import numpy as np
import pytest

from constants import Direction
from numerics import precision
from sources import MarkovSource
from tokenizer import TokenizerConfig
from transformer import ModelConfig


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "unittest: mark test as an Unit Test"
    )
    config.addinivalue_line(
        "markers", "slow: end-to-end training runs, minutes of CPU"
    )


@pytest.fixture(autouse=True)
def double_precision():
    with precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model_config():
    return ModelConfig(layers=3, d_model=16, heads=2, cross_layers=1, vocab_size=5, max_length=8)


@pytest.fixture
def prefix_model_config():
    return ModelConfig(layers=3, d_model=16, heads=2, cross_layers=1, vocab_size=5, max_length=8,
                       direction=Direction.PREFIX)


@pytest.fixture
def small_tokenizer_config():
    return TokenizerConfig(features=3, codebook_size=8, code_dim=4, downsample=4, width=8, batch_size=4,
                           steps=20, log_every=5, learning_rate=1e-3, final_learning_rate=1e-4, decay_step=10)


@pytest.fixture
def desk_chain():
    return MarkovSource.desk()


@pytest.fixture
def sticky_chain():
    # two states, stay with probability 0.8
    return MarkovSource(np.array([[0.8, 0.2], [0.2, 0.8]]), np.array([0.5, 0.5]))


@pytest.fixture
def two_label_words():
    return np.array([[1, 2], [1, 3]])
