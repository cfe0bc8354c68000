import numpy as np
import pytest

from maskselect.policy import new_policy


@pytest.fixture(scope="session")
def model():
    # nonzero head and a wider init so logits are far from uniform
    return new_policy(3, std=0.3, zero_head=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_inputs(rng):
    obs = rng.uniform(0, 1, 8)
    state = np.array([*rng.uniform(0, 1, 2), float(rng.integers(2))])
    return obs, state, int(rng.integers(4))


def random_tokens(rng, n_bands=None):
    from maskselect import tokenizer as tk

    n_bands = n_bands or int(rng.integers(1, tk.HORIZON + 1))
    return [int(t) for t in rng.integers(0, tk.N_LEVELS, n_bands * tk.ACTION_DIM)] + [tk.EOS]


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
