"""Collects the acceptance criteria outcomes and prints one line per criterion."""

import re

import pytest

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    match = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not match:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        if report.outcome == "failed" and not detail:
            detail = str(report.longrepr).strip().splitlines()[-1]
        _ACCEPTANCE[int(match.group(1))] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        outcome, detail = _ACCEPTANCE[number]
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")


@pytest.fixture
def verdict(record_property):
    """``verdict(ok, detail)`` records the detail line and asserts ``ok``."""

    def check(ok, detail):
        record_property("detail", detail)
        assert ok, detail

    return check
