import sys

import pytest

from storwin.runtime import spawn_ranks


@pytest.fixture
def run_ranks():
    """spawn_ranks with a short watchdog, returning per-rank results."""
    def run(nranks, entry, watchdog_s=20.0):
        result = spawn_ranks(nranks, entry, watchdog_s)
        assert result.ok, f"leaked windows {result.leaked}"
        return result.results
    return run


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
