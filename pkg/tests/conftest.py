import pytest

_LINES: list[tuple[int, str]] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion."""

    def record(number, title, passed, detail, seconds):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail} [{seconds:.1f}s]"
        _LINES.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
