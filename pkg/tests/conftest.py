"""Shared pytest hooks: the acceptance suite's PASS/FAIL summary."""

ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"{'PASS' if passed else 'FAIL'} [{number:2d}] {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
