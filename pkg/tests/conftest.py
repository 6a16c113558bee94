"""Shared pytest hooks.

Acceptance tests register one verdict line each on the pytest config;
echoing them in the terminal summary keeps every criterion's outcome
visible in the run log, passing or failing, without -s.
"""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_verdicts", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
