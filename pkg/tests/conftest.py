import numpy as np
import pytest

from loraforget import data, nets


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def seg_small():
    """A 40-image segmentation set, quick enough for per-test training."""
    return data.make(data.GenSpec(count=40, val_count=10, height=16, width=16, seed=3))


@pytest.fixture(scope="session")
def cls_small():
    return data.make(data.GenSpec(task="cls", count=30, val_count=6, height=16, width=16, seed=3))


@pytest.fixture
def seg_net64():
    return nets.SegNet(seed=0, dtype=np.float64)
