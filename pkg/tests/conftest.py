import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_results = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _results[int(m.group(1))] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        outcome, detail = _results[n]
        flag = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{flag}  criterion {n:2d}: {detail}")
