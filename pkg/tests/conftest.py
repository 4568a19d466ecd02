"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""
import pytest

_OUTCOMES = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number = marker.args[0]
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed:
        _OUTCOMES[number] = "FAIL"
    elif report.when == "call" and number not in _OUTCOMES:
        _OUTCOMES[number] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    from acceptance_cases import DESCRIPTIONS

    terminalreporter.section("acceptance criteria")
    for number in sorted(DESCRIPTIONS):
        status = _OUTCOMES.get(number, "NOT RUN")
        terminalreporter.write_line(f"criterion {number}: {status:7} {DESCRIPTIONS[number]}")
