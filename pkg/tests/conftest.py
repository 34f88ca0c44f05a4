import numpy as np
import pytest

from phagraph.graph import InstallEvent, build_graph, graph_from_edges


def ev(d, m, t=0):
    return InstallEvent(d, m, t)


@pytest.fixture
def toy_events():
    """Small install graph with the walk d1 -> m5 -> d4 -> m3 available."""
    pairs = [
        ("d1", "m5"), ("d1", "m2"), ("d2", "m2"), ("d2", "m1"), ("d3", "m5"),
        ("d3", "m4"), ("d4", "m5"), ("d4", "m3"), ("d4", "m4"), ("d5", "m1"),
    ]
    return [ev(d, m, i) for i, (d, m) in enumerate(pairs)]


@pytest.fixture
def toy_graph(toy_events):
    return build_graph(toy_events)


def random_bipartite(rng, n_dev, n_app, p):
    """Random bipartite graph with every vertex of degree >= 1."""
    adj = rng.random((n_dev, n_app)) < p
    for i in range(n_dev):
        if not adj[i].any():
            adj[i, rng.integers(n_app)] = True
    for j in range(n_app):
        if not adj[:, j].any():
            adj[rng.integers(n_dev), j] = True
    d, m = np.nonzero(adj)
    return graph_from_edges([f"d{i}" for i in range(n_dev)], [f"m{j}" for j in range(n_app)], d, m), adj


# verdict lines from the acceptance suite, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
