"""Shared pytest hooks: a one-line-per-criterion report for the acceptance suite."""

ACCEPTANCE_LINES = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> str:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
