import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from stevent.panel import Panel, Station, WindowSplit  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiment, opt in with STEVENT_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("STEVENT_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow; set STEVENT_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def make_panel(y, X=None, coords=None, names=None, start="2020-01-01"):
    """Panel from an (N, tau) array with optional (N, tau, p) covariates."""
    y = np.asarray(y, float)
    n, tau = y.shape
    if coords is None:
        coords = np.column_stack([np.arange(n, dtype=float), np.zeros(n)])
    if X is None:
        X = np.zeros((n, tau, 0))
    X = np.asarray(X, float)
    if names is None:
        names = [f"x{j + 1}" for j in range(X.shape[2])]
    stations = [Station(f"S{i + 1}", float(cx), float(cy)) for i, (cx, cy) in enumerate(coords)]
    timeline = np.datetime64(start, "D") + np.arange(tau)
    return Panel(stations, timeline, y, X, names)


def full_split(tau0, tau1):
    return WindowSplit(-1, tau0 - 1, tau0 + tau1 - 1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail):
    """Register one acceptance verdict for the end-of-run summary."""
    verdict = "PASS" if passed else "FAIL"
    if passed is None:
        verdict = "SKIP"
    ACCEPTANCE_LINES.append((number, f"[{verdict}] criterion {number:>2}: {title} | {detail}"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
