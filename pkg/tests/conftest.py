import re

CRITERION_PATTERN = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            if getattr(report, "when", "call") != "call" and status == "passed":
                continue
            match = CRITERION_PATTERN.search(getattr(report, "nodeid", ""))
            if match:
                number, name = match.groups()
                current = outcomes.get((number, name))
                outcomes[(number, name)] = "FAIL" if status != "passed" else \
                    (current or "PASS")
    if outcomes:
        terminalreporter.write_sep("=", "acceptance criteria")
        for (number, name), verdict in sorted(outcomes.items()):
            terminalreporter.write_line(
                f"criterion {number} {name.replace('_', '-')}: {verdict}")
