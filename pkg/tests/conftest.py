import pytest

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _results.setdefault(n, {"title": title, "ok": True, "tests": 0})
    if rep.when == "call":
        entry["tests"] += 1
    if rep.failed or (rep.when == "call" and rep.skipped):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        e = _results[n]
        status = "PASS" if e["ok"] and e["tests"] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {e['title']} ({e['tests']} test(s))")
