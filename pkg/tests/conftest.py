import numpy as np
import pytest

from pcloop.records import DescriptorSet

# one line per acceptance criterion, filled in by test_acceptance.py
CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return DescriptorSet(v / np.linalg.norm(v, axis=1, keepdims=True))
