import numpy as np
import pytest

from mppo.data import generate_synthetic

# (criterion number, description, passed, detail) appended by test_acceptance
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, desc, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num}. {desc}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus():
    records, _ = generate_synthetic(40, 4, noise=0.0, seed=3)
    return records


@pytest.fixture(scope="session")
def desk_corpus():
    records, _ = generate_synthetic(200, 4, noise=0.0, seed=0)
    return records
