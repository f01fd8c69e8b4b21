import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mesa_slam.datasets import SyntheticConfig, generate
from mesa_slam.factorgraph import Key
from mesa_slam.manifold import random_pose

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_problem():
    """Two robots, 30 poses each, 3D."""
    return generate(SyntheticConfig(robots=2, length=30, seed=3))


@pytest.fixture(scope="session")
def tiny_problem_2d():
    return generate(SyntheticConfig(dims=2, robots=3, length=40, seed=1))


def chain_values(n, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    return {Key(0, i): random_pose(rng, dim) for i in range(n)}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running optional check, run with MESA_SLOW=1")


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS

    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[1].rstrip(":").split("-")[0])):
            terminalreporter.write_line(line)
