import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    from manet.data import write_synthetic_dataset

    root = tmp_path_factory.mktemp("synth")
    write_synthetic_dataset(root, 4, 2, seed=3)
    return root


@pytest.fixture(scope="session")
def e2e_root(tmp_path_factory):
    """The end-to-end synthetic set: 16 train + 4 test scenes of 128 px, seed 1."""
    from manet.data import write_synthetic_dataset

    root = tmp_path_factory.mktemp("e2e")
    write_synthetic_dataset(root, 16, 4, seed=1)
    return root


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
