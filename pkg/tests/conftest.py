import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from neurolidar.events import EventStream

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_stream(rng, n, height, width, t_max=1_000_000):
    t = np.sort(rng.integers(0, t_max, size=n))
    x = rng.integers(0, width, size=n)
    y = rng.integers(0, height, size=n)
    p = rng.choice(np.array([-1, 1]), size=n)
    return EventStream(height, width, t, x, y, p)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


VERDICTS = {}


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line for a numbered acceptance criterion."""
    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS[number] = line
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.line(VERDICTS[n])
