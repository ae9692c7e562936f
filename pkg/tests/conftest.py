import numpy as np
import pytest

from stopbsde.paths import first_exit_time, make_grid, sample_ensemble


@pytest.fixture(scope="session")
def small():
    """64 steps, 4000 paths: fast structural checks."""
    return sample_ensemble(make_grid(1.0, 64), 4000, seed=11)


@pytest.fixture(scope="session")
def medium():
    """256 steps, 10^4 paths: statistical checks at the documented sizes."""
    return sample_ensemble(make_grid(1.0, 256), 10_000, seed=3)


@pytest.fixture(scope="session")
def medium_exit(medium):
    return first_exit_time(medium, 1.0)


def within(estimate, target, se, k=3.0):
    return abs(estimate - target) <= k * se


def mean_se(x):
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, (passed, detail) in sorted(mod.VERDICTS.items()):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
