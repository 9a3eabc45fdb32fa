"""Collects acceptance-criterion outcomes and prints one verdict line per criterion."""

import pytest

_VERDICTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    ok = report.passed
    reason = ""
    if not ok:
        reason = str(getattr(call.excinfo, "value", "") or report.longreprtext.splitlines()[-1])
        reason = reason.strip().splitlines()[0] if reason.strip() else "failed"
    previous = _VERDICTS.get(number)
    # several tests may cover one criterion; it passes only if all of them pass
    if previous is None or previous[1]:
        _VERDICTS[number] = (title, ok, reason)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, ok, reason = _VERDICTS[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if not ok:
            line += f"  ({reason})"
        terminalreporter.write_line(line)
