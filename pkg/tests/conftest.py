import re

import pytest

_LINES = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line for an acceptance criterion and echo it."""

    def report(criterion, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
        _LINES[str(criterion)] = line
        print(line)
        return passed

    return report


def _order(key):
    return [int(v) if v.isdigit() else v for v in re.split(r"(\d+)", key)]


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_LINES, key=_order):
        terminalreporter.write_line(_LINES[key])
