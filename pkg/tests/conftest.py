"""Shared pytest plumbing: the acceptance suite records one line per
criterion here so the run ends with a compact pass/fail table."""

_criteria = {}


def record_criterion(number: int, description: str, passed: bool, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    suffix = f"  ({detail})" if detail else ""
    _criteria[number] = f"[{status}] criterion {number:2d}: {description}{suffix}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        terminalreporter.write_line(_criteria[number])
