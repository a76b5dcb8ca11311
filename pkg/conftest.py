import os

import pytest
import torch

from heteroseg.data import generate_phantoms, normalize
from heteroseg.nets import NetworkConfig, NetworkKind
from heteroseg.training import TrainConfig

# depth 2: a 20^3 input maps to a 4^3 target, 28^3 to 12^3
TINY_PATCH = 20
TINY_DEPTH = 2


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long statistical runs, enabled with HETEROSEG_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.getenv("HETEROSEG_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set HETEROSEG_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def phantoms():
    """Six normalized 32^3 subjects."""
    return [(normalize(v), l) for v, l in generate_phantoms(seed=0, n_subjects=6, side=32)]


@pytest.fixture
def tiny_network():
    def make(kind: NetworkKind = NetworkKind.SINGLE, **overrides) -> NetworkConfig:
        fields = {"base_width": 2, "pathway_width": 2, "depth": TINY_DEPTH} | overrides
        return NetworkConfig(kind=kind, **fields)

    return make


@pytest.fixture
def tiny_train():
    def make(**overrides) -> TrainConfig:
        fields = {
            "epochs": 3,
            "batches_per_epoch": 2,
            "batch_size": 2,
            "patch_side": TINY_PATCH,
            "learning_rate": 1e-2,
            "checkpoint_every": 2,
            "seed": 0,
        } | overrides
        return TrainConfig(**fields)

    return make
