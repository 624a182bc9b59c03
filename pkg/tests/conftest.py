"""Shared pytest hooks: echo acceptance verdict lines after the run.

Capture normally swallows stdout from passing tests, so the acceptance
checks record their one-line verdicts here and the terminal summary
replays them where they are always visible.
"""

VERDICTS: list = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
