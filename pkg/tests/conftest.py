import re
import sys
from pathlib import Path

# the oracle module sits next to the tests
sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, tuple[str, str, str]] = {}
_NAME = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    """Collect the outcome of each acceptance criterion test."""
    match = _NAME.search(report.nodeid)
    if not match or "test_acceptance" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        outcome = "PASS" if report.outcome == "passed" else "FAIL"
        _CRITERIA[int(match.group(1))] = (match.group(2).replace("_", " "), outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        name, outcome, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {outcome}  {name}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
