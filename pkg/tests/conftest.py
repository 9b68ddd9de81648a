import numpy as np
import pytest

from adaptive_lqr.dynamics import SystemSpec
from adaptive_lqr.presets import preset, random_stable_system


@pytest.fixture(scope="session")
def eq11_spec():
    return SystemSpec(*preset("paper-eq11"))


def random_spec(seed, p=None, r=None):
    rng = np.random.default_rng(seed)
    if p is None:
        p, r = (int(v) for v in rng.integers(1, 4, size=2))
    return SystemSpec(*random_stable_system(p, r, rng))


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
