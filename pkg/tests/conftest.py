"""Collects one PASS/FAIL line per acceptance criterion and prints them after the run."""

import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and not report.failed:
        return
    number, title = mark.args
    prev = item.config._criteria.get(number)
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    passed = report.passed and (prev is None or prev[1])
    item.config._criteria[number] = (title, passed, report.duration, detail or (prev[3] if prev else ""))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config._criteria
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(rows):
        title, passed, duration, detail = rows[number]
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}  ({duration:.1f}s)"
        terminalreporter.write_line(line)
        if detail:
            terminalreporter.write_line(f"    {detail}")
