import numpy as np
import pytest

from dspi.garnet import GarnetSpec, generate_garnet
from dspi.mdp import TabularMdp


def random_policy(rng, n, m):
    p = rng.uniform(0.0, 1.0, size=(n, m)) ** 3
    return p / p.sum(axis=1, keepdims=True)


def chain_mdp(gamma=0.5):
    """s0 -a0-> s1 -a0-> s1, reward 0 then 1."""
    p = np.zeros((2, 1, 2))
    p[0, 0, 1] = 1.0
    p[1, 0, 1] = 1.0
    return TabularMdp(p, np.array([[0.0], [1.0]]), gamma)


def one_state(rewards, gamma):
    m = len(rewards)
    return TabularMdp(np.ones((1, m, 1)), np.array([rewards], dtype=float), gamma)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_mdp():
    return generate_garnet(GarnetSpec(6, 3, 3, 0.9, seed=7))


VERDICTS: list[str] = []


def verdict(label, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
