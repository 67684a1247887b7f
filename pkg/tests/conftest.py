import numpy as np
import pytest

from fedbiad.nn import ModelSpec, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_model(kind, n_layers=2, in_dim=3, hidden=4, out=2, readout="identity", seed=0):
    spec = ModelSpec(kind, n_layers, in_dim, hidden, out, readout_activation=readout)
    return spec, init_params(spec, np.random.default_rng(seed))
