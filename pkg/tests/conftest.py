import json

import numpy as np
import pytest
import torch

from config import Config
from lensflow import create_app
from lensflow.geometry import make_lens


class TestingConfig(Config):
    LOG_LEVEL = "WARNING"
    PARALLEL_TORI = False
    N_MC = 10_000


@pytest.fixture
def app(tmp_path):
    class _Config(TestingConfig):
        OUTPUT_ROOT = str(tmp_path / "out")

    return create_app(_Config)


@pytest.fixture
def runner(app):
    return app.test_cli_runner()


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


@pytest.fixture(params=[(3, 2), (7, 3), (12, 1), (2, 1)], ids=lambda pq: f"L{pq[0]}_{pq[1]}")
def lens(request):
    return make_lens(*request.param)


@pytest.fixture
def lens32():
    return make_lens(3, 2)


TINY_CONFIG = {
    "name": "tiny",
    "lens": {"p": 3, "q": 2},
    "target": {
        "kind": "vmf-mixture",
        "components": [
            {"mu": [1.0, 0.0, 0.0, 0.0], "kappa": 10.0, "weight": 0.5},
            {"mu": [0.0, 0.0, 1.0, 0.0], "kappa": 10.0, "weight": 0.5},
        ],
    },
    "train": {"epochs": 3, "batch": 64, "n_pairs": 1, "log_every": 0},
    "eval": {"n_samples": 2000, "n_kl": 1000, "mode_min_count": 2},
    "normalizer": {"n_mc": 10000, "seed": 0},
}


@pytest.fixture
def tiny_config_text():
    return json.dumps(TINY_CONFIG, indent=2)


@pytest.fixture
def tiny_config_path(tmp_path, tiny_config_text):
    path = tmp_path / "tiny.json"
    path.write_text(tiny_config_text)
    return path


@pytest.fixture(autouse=True)
def single_thread():
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)
