import re

import numpy as np
import pytest

_AC_RESULTS = {}
_AC_NOTES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def ac_note():
    """Append a measured value to the acceptance summary."""
    return _AC_NOTES.append


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_ac(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    failed = report.failed or (report.when == "call" and report.outcome != "passed")
    if report.when == "call" or failed:
        prev = _AC_RESULTS.get(key, "PASS")
        _AC_RESULTS[key] = "FAIL" if failed or prev == "FAIL" else report.outcome.upper()


def pytest_terminal_summary(terminalreporter):
    if not _AC_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    by_ac = {}
    for (n, name), status in sorted(_AC_RESULTS.items()):
        by_ac.setdefault(n, []).append((name, status))
    for n, items in by_ac.items():
        ok = all(s == "PASSED" or s == "PASS" for _, s in items)
        label = ", ".join(name for name, _ in items)
        terminalreporter.write_line(f"AC{n} {'PASS' if ok else 'FAIL'}  ({label})")
    for line in _AC_NOTES:
        terminalreporter.write_line(f"    {line}")
