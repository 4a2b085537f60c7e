import numpy as np
import pytest

from poseaug.harness import SyntheticConfig, generate_synthetic
from poseaug.skeleton import SkeletonTopology


@pytest.fixture(scope="session")
def topo():
    return SkeletonTopology.default()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pools():
    cfg = SyntheticConfig(n_source=64, n_source_test=16, n_target=16)
    return generate_synthetic(cfg, seed=3)


# lines recorded by test_acceptance.py, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
