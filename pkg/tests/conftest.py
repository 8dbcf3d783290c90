import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, derandomize=True)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance_report(request):
    """Record one ``[acceptance] name: PASS|FAIL (detail)`` line for the run summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, [])

    def record(name, ok, detail):
        lines.append(f"[acceptance] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
