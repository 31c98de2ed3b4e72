"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion at the end of the run."""

import pytest

_OUTCOMES: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _OUTCOMES.setdefault(number, {"title": title, "passed": True, "details": [], "ran": False})
    if report.when == "call":
        entry["ran"] = True
    if report.failed:
        entry["passed"] = False
    if report.when == "call":
        entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        e = _OUTCOMES[number]
        status = "PASS" if e["passed"] and e["ran"] else "FAIL"
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"[{status}] criterion {number}: {e['title']}" + (f" ({detail})" if detail else ""))
