import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bsdelab.models import block_model, build_brownian_proxy
from bsdelab.tree import constant_channel, uniform_tree


def n_leaves(model):
    sl = model.space.slice(model.space.steps)
    return sl.stop - sl.start


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def mixed_model():
    """One Brownian proxy, one default, one Poisson channel."""
    steps = 4
    return block_model(steps, 1.0, 1, [constant_channel("default", 0.6, steps),
                                       constant_channel("poisson", 1.2, steps)], 1.0)


@pytest.fixture(scope="session")
def default_model():
    steps = 6
    return block_model(steps, 1.0, 1, [constant_channel("default", 0.5, steps)], 1.0)


@pytest.fixture(scope="session")
def walk_model():
    return build_brownian_proxy(uniform_tree(5, 1.0, 3), 2)


# -- acceptance summary ---------------------------------------------------

ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> str:
    line = f"[criterion {criterion:2d}] {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
