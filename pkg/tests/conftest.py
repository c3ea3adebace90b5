import numpy as np
import pytest

from gisplab import data_eval as D
from gisplab import model as M
from gisplab import textgen


def small_config(**overrides) -> M.ModelConfig:
    base = dict(n_layers=2, n_heads=4, d_model=32, d_ff=16,
                max_seq_len=16, rng_seed=0)
    base.update(overrides)
    return M.ModelConfig(**base)


@pytest.fixture(scope="session")
def small_weights():
    return M.init_weights(small_config())


@pytest.fixture(scope="session")
def small_tokens():
    rng = np.random.default_rng(7)
    return rng.integers(0, 256, size=(3, 12))


@pytest.fixture(scope="session")
def tiny_corpus():
    return textgen.generate_corpus(120_000)


@pytest.fixture(scope="session")
def tiny_trained(tiny_corpus):
    """A briefly trained 2-layer model; enough signal for ordering tests.

    max_seq_len 64 so the synthetic QA items (prompt + answer ~45 bytes) fit.
    """
    cfg = small_config(n_layers=2, d_model=32, d_ff=32, n_heads=4,
                       max_seq_len=64)
    weights = M.train_dense(cfg, D.tokenize(tiny_corpus), steps=80,
                            learning_rate=3e-3, batch=8, seed=0)
    return weights
