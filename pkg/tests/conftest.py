import numpy as np
import pytest

from quantspec.model import ModelConfig, init_weights

TOY_CONFIG = ModelConfig(
    num_layers=2,
    num_heads=4,
    head_dim=16,
    hidden=64,
    mlp_hidden=176,
    vocab=64,
    max_positions=2048,
)


@pytest.fixture(scope="session")
def toy_weights():
    return init_weights(TOY_CONFIG, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def make_prompt(length: int, seed: int, vocab: int = TOY_CONFIG.vocab) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, vocab, size=length, dtype=np.int64)
