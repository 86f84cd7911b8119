import numpy as np
import pytest

from stgat_fuser.data import prepare, synthesize
from stgat_fuser.model import ModelConfig

TINY = dict(conv_out_channels=4, gat_out_dim=4, lstm_hidden=6, fc_hidden_dims=(5, 1), mlp_hidden_dims=(8,))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


@pytest.fixture(scope="session")
def small_series():
    return synthesize(200, seed=11)


@pytest.fixture(scope="session")
def small_data(small_series):
    return prepare(small_series)


@pytest.fixture(scope="session")
def corpus_csv(tmp_path_factory, small_series):
    from stgat_fuser.data import write_csv
    return write_csv(small_series, tmp_path_factory.mktemp("corpus") / "corpus.csv")
