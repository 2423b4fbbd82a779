from __future__ import annotations

import numpy as np
import pytest

from quadftc.sim import QuadParams, with_overrides


@pytest.fixture
def params() -> QuadParams:
    return QuadParams()


@pytest.fixture
def no_drag(params) -> QuadParams:
    return with_overrides(params, c_d=0.0, c_r=0.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


_REPORT = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_REPORT] = []


@pytest.fixture
def criterion_report(request):
    """Collects one summary line per acceptance criterion for the terminal report."""
    return request.config.stash[_REPORT]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
