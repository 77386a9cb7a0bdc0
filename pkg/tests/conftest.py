import json

import numpy as np
import pytest

import datasets
import schedule
from denoiser import NOISING_VARIANCE, PREDICT_EPS, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def two_level():
    """lambda = [0.9, 0.9]: Lambda = [0.9, 0.81], SNR = [4.26316, 1.90782]."""
    return schedule.Schedule([0.9, 0.9])


@pytest.fixture
def short_linear():
    return schedule.make_linear_beta(8, 0.01, 0.02)


@pytest.fixture
def unit_spec():
    return datasets.unit_gaussian()


@pytest.fixture
def gmm_spec():
    return datasets.gmm1d()


@pytest.fixture
def make_net():
    def build(data_dim=1, T=8, seed=0, hidden=(16, 16), embed_dim=4, mode=PREDICT_EPS, variance_mode=NOISING_VARIANCE):
        return init_params(data_dim, T, np.random.default_rng(seed), hidden, embed_dim, mode, variance_mode)

    return build


@pytest.fixture
def write_config(tmp_path):
    """Write a config JSON under tmp_path with logs and runs kept inside it."""
    def write(payload, name="config.json"):
        payload = {"output_dir": str(tmp_path / "runs"), "log_dir": str(tmp_path / "logs"), **payload}
        path = tmp_path / name
        path.write_text(json.dumps(payload), encoding="utf-8")
        return path

    return write
