import numpy as np
import pytest

from echoact.signal import default_chirps, generate_chirp


@pytest.fixture(scope="session")
def chirps():
    cl, cr = default_chirps()
    return generate_chirp(cl), generate_chirp(cr)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
