import re

import pytest

_CRITERIA = {}
_DETAILS = {}


@pytest.fixture
def note(request):
    """Record a detail line that the acceptance summary prints under its criterion."""
    m = re.match(r"test_criterion_(\d+)_", request.node.name)
    key = int(m.group(1)) if m else None
    return lambda line: _DETAILS.setdefault(key, []).append(str(line))


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[n] = (m.group(2), report.outcome, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, outcome, secs = _CRITERIA[n]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"CRITERION {n}: {verdict}  {name} ({secs:.1f} s)")
        for line in _DETAILS.get(n, []):
            terminalreporter.write_line(f"    {line}")
