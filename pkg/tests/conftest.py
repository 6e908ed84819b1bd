"""Gemeinsame Fixtures und die Option --runslow für längere Läufe."""

import numpy as np
import pytest


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="langsame Tests ausführen")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: längerer Trainings-/Gradcheck-Lauf")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="braucht --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
