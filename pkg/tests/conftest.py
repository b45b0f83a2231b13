"""Shared pytest plumbing.

test_acceptance.py appends one line per release criterion; echoing them
in the terminal summary keeps the pass/fail record visible even though
pytest captures stdout from passing tests.
"""

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
