"""Collects acceptance-criterion verdicts and prints one line per criterion."""

import pytest

_VERDICTS: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, name = mark.args
    entry = _VERDICTS.setdefault(number, {"name": name, "passed": True, "details": []})
    if report.when == "call" or report.failed:
        entry["passed"] = entry["passed"] and report.passed
    if report.when == "call":
        entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        v = _VERDICTS[number]
        status = "PASS" if v["passed"] else "FAIL"
        detail = "; ".join(v["details"])
        terminalreporter.write_line(f"criterion {number:>2} {status}  {v['name']}" + (f"  [{detail}]" if detail else ""))
