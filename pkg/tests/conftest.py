import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pgits import data, stations

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_stations():
    return data.synthetic_stations(12, seed=3)


@pytest.fixture(scope="session")
def small_table(small_stations):
    graph = stations.build_graph(small_stations)
    cfg = data.SyntheticConfig(start="2014-02-20T00")
    return data.generate_synthetic(graph, 24 * 20, cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one acceptance line; it is echoed again in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(name, status, detail):
        tag = {True: "PASS", False: "FAIL"}.get(status, status)
        line = f"[{tag}] {name}: {detail}"
        lines.append(line)
        print(line)
        return status

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
