import numpy as np
import pytest

from airway_repair.phantom import PhantomSpec, generate

ACCEPTANCE_LINES = []


def record_acceptance(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def phantom4():
    return generate(PhantomSpec(generations=4, seed=0))


@pytest.fixture(scope="session")
def phantom3():
    return generate(PhantomSpec(generations=3, seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
