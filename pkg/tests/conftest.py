import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from iminer.config import MiningConfig
from iminer.toy.benchmark import train_initial
from iminer.toy.world import generate_world


TINY = MiningConfig(
    seed=0,
    n_base_scenes=40,
    n_test_scenes=15,
    base_iters=600,
    shot_iters=250,
    online_iters=250,
    finetune_iters=40,
    shots=2,
)


@pytest.fixture(scope="session")
def tiny_cfg() -> MiningConfig:
    return TINY


@pytest.fixture(scope="session")
def tiny_world(tiny_cfg):
    return generate_world(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_initial(tiny_world, tiny_cfg):
    """The offline-trained starting learner, shared across tests."""
    return train_initial(tiny_world, tiny_cfg)
