import pytest

_LINES = {}


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def report(n, ok, detail):
        _LINES[n] = f"acceptance {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, _LINES[n]

    return report


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
