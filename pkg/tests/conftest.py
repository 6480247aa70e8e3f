import math

import numpy as np
import pytest
from hypothesis import settings

from dofield import kernels
from dofield.chain import ChainSpec

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def arm3():
    return ChainSpec(3, (0.25, 0.25, 0.2), (0.07, 0.065, 0.06),
                     ((0, 0, -1), (0, 1, 0), (0, 1, 0)),
                     ((-math.pi, math.pi), (-1.0, 1.0), (-1.2, 1.2)))


@pytest.fixture
def arm2():
    return ChainSpec(2, (0.35, 0.3), (0.05, 0.05), ((0, 0, -1), (0, 0, 1)),
                     ((-math.pi, math.pi), (-2.6, 2.6)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=sorted(kernels.backends()))
def backend(request):
    return kernels.backends()[request.param]


_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``; fails the test when not ok."""

    def record(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[n] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
