"""Collects one verdict line per acceptance criterion and prints them at the end of the run."""
import pytest

VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call":
        return
    num = mark.args[0]
    if report.failed and (num not in VERDICTS or VERDICTS[num][0]):
        # crashed before recording, or a later assertion failed
        msg = str(call.excinfo.value).splitlines()[0] if call.excinfo else "failed"
        VERDICTS[num] = (False, f"{item.name}: {msg}")


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(VERDICTS):
        ok, line = VERDICTS[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {num:>2}: {line}")
