import itertools

import numpy as np
import pytest


def has_cycle_dfs(A) -> bool:
    """Three-colour depth-first search; independent of Kahn's algorithm."""
    A = np.asarray(A) != 0
    d = A.shape[0]
    colour = [0] * d

    def visit(u):
        colour[u] = 1
        for v in np.flatnonzero(A[u]):
            if colour[v] == 1:
                return True
            if colour[v] == 0 and visit(v):
                return True
        colour[u] = 2
        return False

    return any(colour[u] == 0 and visit(u) for u in range(d))


def all_digraphs(d):
    """Every loop-free directed graph on ``d`` labelled nodes."""
    pairs = [(i, j) for i in range(d) for j in range(d) if i != j]
    for bits in itertools.product((0, 1), repeat=len(pairs)):
        A = np.zeros((d, d))
        for (i, j), b in zip(pairs, bits):
            A[i, j] = b
        yield A


def random_dag(d, rng, density=0.3):
    upper = np.triu(rng.random((d, d)) < density, k=1).astype(float)
    perm = rng.permutation(d)
    A = np.zeros((d, d))
    A[np.ix_(perm, perm)] = upper
    return A


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# lines printed by the acceptance tests, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
