import os

import hypothesis
import numpy as np
import pytest

from magray.geometry import constant_field_system

np.seterr(all="warn", under="ignore")

hypothesis.settings.register_profile("default", max_examples=25, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def euclid():
    return constant_field_system(0.0)


@pytest.fixture(scope="session")
def field03():
    return constant_field_system(0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; returns a callable
    record(number, name, ok, elapsed, budget, detail)."""

    def record(number, name, ok, elapsed, budget, detail=""):
        within = elapsed < budget
        status = "PASS" if ok and within else "FAIL"
        line = f"{status} criterion {number:2d} {name}: {detail} ({elapsed:.1f} s of {budget:.0f} s)"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok and within

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
