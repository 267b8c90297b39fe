import json

import numpy as np
import pytest

from condalign.conddist import BiasSpec, Categorical, Continuous
from condalign.config import DEFAULT_CONFIG, ExperimentConfig, default_config
from condalign.simulator import generate


@pytest.fixture
def one_bucket():
    return BiasSpec((Categorical("all", 1),))


@pytest.fixture
def small_spec():
    return BiasSpec((Categorical("category", 3), Continuous("duration", (10.0, 30.0))))


def keys_of(n, key=(0,)):
    return np.tile(np.asarray(key, dtype=np.int64), (n, 1))


@pytest.fixture(scope="session")
def default_data():
    """The 200k-record default scenario, generated once per session."""
    cfg = default_config()
    return cfg, generate(cfg.sim_config())


def small_config_dict(n_records=3000, **overrides) -> dict:
    d = json.loads(json.dumps(DEFAULT_CONFIG))
    d["simulator"]["n_records"] = n_records
    d["evaluation"]["figures"] = False
    d["evaluation"]["ks_min_bucket_n"] = 100
    for k, v in overrides.items():
        d[k] = v
    return d


@pytest.fixture
def small_config():
    return ExperimentConfig.from_dict(small_config_dict())
