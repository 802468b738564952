import numpy as np
import pytest

from opsdp.fixtures import fixture
from opsdp.mdp import LayeredMdp


@pytest.fixture(scope="session")
def t1():
    return fixture("T1")


@pytest.fixture(scope="session")
def c3():
    return fixture("C3")


@pytest.fixture(scope="session")
def l1():
    return fixture("L1")


def random_mdp(rng, sizes=(2, 3, 2), n_actions=2, d=3, name="R"):
    """Small random layered MDP with features in the unit ball."""
    trans = [rng.dirichlet(np.ones(sizes[h + 1]), size=(sizes[h], n_actions)) for h in range(len(sizes) - 1)]
    rewards = [rng.uniform(0, 1, size=(n, n_actions)) for n in sizes]
    feats = []
    for n in sizes:
        f = rng.normal(size=(n, n_actions, d))
        f /= np.maximum(1.0, np.linalg.norm(f, axis=-1, keepdims=True))
        feats.append(f)
    return LayeredMdp(trans, rewards, feats, rng.dirichlet(np.ones(sizes[0])), name)


def deterministic_chain(horizon=3, n_actions=2, reward=1.0):
    """One state per layer, every action pays ``reward``."""
    trans = [np.ones((1, n_actions, 1)) for _ in range(horizon - 1)]
    rewards = [np.full((1, n_actions), reward) for _ in range(horizon)]
    feats = [np.eye(n_actions)[None, :, :] for _ in range(horizon)]
    return LayeredMdp(trans, rewards, feats, np.ones(1), "chain")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
