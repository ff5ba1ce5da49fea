"""Shared pytest hooks: acceptance criteria report one line each at the end."""

ACCEPTANCE_LINES: list[str] = []


def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
    if detail:
        line += f"  [{detail}]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
