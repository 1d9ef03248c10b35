import sys

import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Call with ``(number, passed, detail)``; prints one line and fails the test if not passed."""

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        request.config.stash.setdefault(_LINES, []).append(line)
        print(line, file=sys.__stdout__ if request.config.getoption("capture") == "no" else sys.stdout)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
