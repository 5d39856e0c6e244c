import numpy as np
import pytest

from bluralign import _instrument

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _clean_counters():
    _instrument.reset()
    yield
    _instrument.reset()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the line is printed in the terminal summary."""
    def record(key, ok, detail):
        request.config.stash[_ACCEPTANCE][key] = (bool(ok), detail)
        assert ok, f"{key}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: int(k[1:])):
        ok, detail = results[key]
        terminalreporter.write_line(f"{key:4s} {'PASS' if ok else 'FAIL'}  {detail}")
