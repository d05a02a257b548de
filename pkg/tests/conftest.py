import pytest

_CRITERIA: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def _report(number: int, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        _CRITERIA.append(line)
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
