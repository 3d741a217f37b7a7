import numpy as np
import pytest

from attnhess.model import Sequence, init_spec

ACCEPTANCE_LINES: list[str] = []


def make_instance(seed, L=3, d_v=4, d_k=2, sigma=1.0, **kw):
    """Random weights ``N(0, 0.64/d_v)``, tokens ``N(0, sigma^2)``, labels ``N(0, 1)``."""
    rng = np.random.default_rng(seed)
    spec = init_spec(d_v, d_k, rng, **kw)
    seq = Sequence(sigma * rng.normal(size=(L, d_v)), rng.normal(size=(L, d_v)))
    return spec, seq


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def instance():
    return make_instance(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
