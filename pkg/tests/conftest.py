import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance PASS/FAIL lines after the run, uncaptured."""
    lines = getattr(
        sys.modules.get("test_acceptance"), "REPORTED_LINES", None
    )
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.line(line)
