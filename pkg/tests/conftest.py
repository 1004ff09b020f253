import pytest

AC_LINES: list[str] = []


@pytest.fixture
def ac_report():
    """Record one acceptance line, then fail the test if the criterion is unmet."""
    def report(name: str, ok: bool, detail: str) -> None:
        line = f"{name} {'PASS' if ok else 'FAIL'}  {detail}"
        AC_LINES.append(line)
        print(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if AC_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(AC_LINES, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
