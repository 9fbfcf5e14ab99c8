import sys

import numpy as np
import pytest

from relchain.story import DatasetConfig, generate_dataset


@pytest.fixture(scope="session")
def tiny_split():
    """A small clean dataset for fast training and evaluation tests."""
    return generate_dataset(DatasetConfig(train_ks=(2, 3), test_ks=(2, 3, 4), n_train=120, n_valid=40,
                                          n_test_per_k=30, master_seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = module.summary_lines() if module else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
