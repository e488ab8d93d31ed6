import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_outcomes = {}
_notes = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(n, []).append(report.outcome)
    for key, value in report.user_properties if report.when == "call" else ():
        if key == "criterion_note":
            _notes.setdefault(n, []).append(value)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    words = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
    for n in sorted(_outcomes):
        seen = _outcomes[n]
        # a criterion fails if any part fails and is skipped only if every part was
        outcome = "failed" if "failed" in seen else "passed" if "passed" in seen else "skipped"
        notes = "; ".join(_notes.get(n, []))
        line = f"criterion {n}: {words[outcome]}"
        terminalreporter.write_line(line + (f"  ({notes})" if notes else ""))
