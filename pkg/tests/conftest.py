import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ecstore.model import Exponential, FileClass, JlcmParams, Scenario, StorageNode

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def exp_node(j, mu, cost=1.0):
    return StorageNode.from_dist(j, Exponential(mu), cost=cost)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_node_symmetric():
    nodes = [exp_node(1, 1.0), exp_node(2, 1.0)]
    files = [FileClass(1, 1, 0.6)]
    return Scenario(nodes, files, JlcmParams(theta=0.0))


ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
