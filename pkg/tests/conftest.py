"""Shared pytest plumbing: surfaces the acceptance-criteria verdicts.

The acceptance tests register one [PASS]/[FAIL] line apiece; printing them
from inside a test would be swallowed by capture, so they are replayed in
the terminal summary instead.
"""

VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
