import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "chx", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("chx")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


# one line per acceptance criterion, printed after the run
CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, text = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text}")
