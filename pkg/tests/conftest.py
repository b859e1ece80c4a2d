import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from calibra.properties import FiniteDistribution

# first calls pay for numba compilation, so per-example deadlines are noise
settings.register_profile("calibra", deadline=None)
settings.load_profile("calibra")

# Labels on a 0.01 grid keep atoms exactly representable-ish and distinct.
label_values = st.integers(0, 100).map(lambda k: k / 100)


@st.composite
def finite_dists(draw, max_atoms=6):
    ys = draw(st.lists(label_values, min_size=1, max_size=max_atoms, unique=True))
    ws = draw(st.lists(st.integers(1, 20), min_size=len(ys), max_size=len(ys)))
    total = sum(ws)
    return FiniteDistribution(ys, [w / total for w in ws])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
