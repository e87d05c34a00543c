"""Shared pytest plumbing: a verdict board for the acceptance criteria."""
import pytest

VERDICTS = {}


@pytest.fixture
def verdict():
    """Record ``(criterion number, ok, detail)``; the board prints at session end."""

    def record(number, ok, detail):
        VERDICTS[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        ok, detail = VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
