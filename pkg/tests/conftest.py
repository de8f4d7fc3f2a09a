import pytest

_CRITERIA = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _CRITERIA.append((marker.args[0], marker.args[1], rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_CRITERIA):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
