import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mobility_msm.data import RegionSeries

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_series(T=40, seed=0, region="R", feedback=0.0):
    """Smooth epidemic-like series with mobility responding to past deaths."""
    rng = np.random.default_rng(seed)
    a = np.empty(T)
    L = np.empty(T)
    a[0], L[0] = 0.2, 2.0
    for t in range(1, T):
        a[t] = np.clip(0.2 + 0.5 * (a[t - 1] - 0.2) + feedback * L[t - 1] + 0.03 * rng.standard_normal(), 0, 1)
        lag = a[t - 4] - a[0] if t >= 4 else 0.0
        L[t] = max(0.0, L[t - 1] + 0.15 - 2.0 * lag + 0.1 * rng.standard_normal())
    return RegionSeries.from_raw(region, np.round(np.expm1(L)), a)


@pytest.fixture
def series40():
    return random_series(40, seed=1)


@pytest.fixture(autouse=True)
def _quiet_runtime_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
