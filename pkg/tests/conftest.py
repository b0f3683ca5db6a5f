import os

import numpy as np
import pytest

from bnlab.services import data_partition, nn_core


def pytest_collection_modifyitems(config, items):
    if os.getenv("BNLAB_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set BNLAB_RUN_SLOW=1 to run desk-scale reproductions")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_data():
    """30 samples, 3 classes, 6 dims."""
    return data_partition.gen_synthetic(3, 10, 6, 0.5, seed=0)


@pytest.fixture
def mlp_model():
    arch = nn_core.mlp((6,), 3, hidden=5)
    return arch, nn_core.init_params(arch, 1), nn_core.init_running_stats(arch)
