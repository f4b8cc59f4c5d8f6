# conftest.py

import numpy as np
import pytest

from mspformer import tensor as T
from mspformer.model import ModelConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def float64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig.tiny()


def write_ppm(path, pixels):
    """Raw P6 writer used to build fixtures independently of image_io."""
    _, h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.transpose(1, 2, 0).astype(np.uint8).tobytes())
