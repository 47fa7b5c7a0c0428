"""Shared pytest hooks: print collected acceptance verdicts after the run."""

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("release criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)
