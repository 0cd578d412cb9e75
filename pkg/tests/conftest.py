import os
import sys
import time
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from exitflow import catalog  # noqa: E402
from exitflow.characteristics import sweep  # noqa: E402
from exitflow.oracle import solve_grid  # noqa: E402

settings.register_profile("exitflow", deadline=None, max_examples=30, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("exitflow")


@pytest.fixture(scope="session")
def disk():
    return catalog.make_problem("eikonal-disk")


@pytest.fixture(scope="session")
def focus():
    return catalog.make_problem("focus")


@pytest.fixture(scope="session")
def ex1():
    return catalog.make_problem("ex1")


@pytest.fixture(scope="session")
def disk_sweep(disk):
    """64 radial characteristics over [0, 5] with both variational pairs."""
    problem, model = disk
    return sweep(problem, model, 64, horizon=5.0, step=1e-3, record_every=10, tangent=True)


@pytest.fixture(scope="session")
def focus_sweep(focus):
    """64 focusing characteristics; the RK4 grid does not contain t = 1."""
    problem, model = focus
    return sweep(problem, model, 64, horizon=1.2, step=1.3e-3, record_every=5, tangent=True)


@pytest.fixture(scope="session")
def disk_oracle(disk):
    problem, _ = disk
    return solve_grid(problem, ((-3.0, -3.0), (3.0, 3.0)), 0.05, controls=64)


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion

_ACCEPTANCE = []


class _Criterion:
    def __init__(self, number, title, budget=None):
        self.number, self.title, self.budget = number, title, budget
        self.notes = []

    def note(self, text):
        self.notes.append(text)

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.elapsed = time.perf_counter() - self.start
        ok = exc_type is None
        if ok and self.budget is not None and self.elapsed > self.budget:
            ok = False
            self.notes.append(f"runtime {self.elapsed:.1f}s exceeds {self.budget:g}s")
        line = (f"criterion {self.number:2d} {'PASS' if ok else 'FAIL'}  {self.title}"
                f"  [{self.elapsed:.1f}s]" + ("; " + "; ".join(self.notes) if self.notes else ""))
        _ACCEPTANCE.append((self.number, line))
        print(line)
        if exc_type is None and not ok:
            raise AssertionError(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
