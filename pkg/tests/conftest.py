import pytest

ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion.

    The line is stored before the assertion runs, so failures are reported
    too.
    """
    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
