import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_connected_graphs(max_nodes=6, min_nodes=2):
    """Every connected graph on ``min_nodes..max_nodes`` nodes, up to
    isomorphism, as a PowerGraph whose first bus is the generator."""
    import networkx as nx

    from gridpredict.grid import PowerGraph

    out = []
    for h in nx.graph_atlas_g():
        n = h.number_of_nodes()
        if n < min_nodes or n > max_nodes or not nx.is_connected(h):
            continue
        buses = [(i + 1, "G" if i == 0 else "L") for i in range(n)]
        out.append(PowerGraph.from_lists(buses, [(u + 1, v + 1) for u, v in h.edges()]))
    return out


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
