import pytest

_RESULTS: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one PASS/FAIL line; the lines are printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        _RESULTS.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
