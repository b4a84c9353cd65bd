import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when == "setup" and rep.passed) or rep.when == "teardown":
        return
    number, title = marker.args
    notes = [v for k, v in item.user_properties if k == "summary"]
    ok = rep.passed and not getattr(rep, "wasxfail", False)
    prev = _CRITERIA.get(number)
    if prev is not None:
        ok = ok and prev[1]
        notes = prev[2] + notes
    _CRITERIA[number] = (title, ok, notes)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, notes = _CRITERIA[number]
        line = f"criterion {number} {title}: {'PASS' if ok else 'FAIL'}"
        if notes:
            line += " | " + "; ".join(notes)
        terminalreporter.write_line(line)
