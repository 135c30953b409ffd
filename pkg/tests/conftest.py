import numpy as np
import pytest
import torch

from gaitgs.synthetic import generate_synthetic

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def desk_set():
    """16 subjects x 4 views x 2 conditions x 2 sequences x 40 frames, seed 7."""
    return generate_synthetic(16, [0, 30, 60, 90], ["none", "coat"], 2, 40, 7)


@pytest.fixture(scope="session")
def small_set():
    return generate_synthetic(4, [0, 90], ["none", "coat"], 2, 32, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
