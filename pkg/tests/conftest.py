"""Shared pytest wiring: the acceptance tests register one line per
criterion here, and the terminal summary prints them whether or not
output capture is on."""

acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.line(line)
