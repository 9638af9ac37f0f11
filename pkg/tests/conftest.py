import numpy as np
import pytest

from smalldiv.constants import get_constants


@pytest.fixture(scope="session")
def consts():
    return get_constants(1, 1, 2.0, 8.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """record(k, ok, detail): one summary line per acceptance criterion."""
    def record(k, ok, detail):
        _ACCEPTANCE[k] = f"acceptance {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
