import pytest

_RESULTS: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    n = marker.args[0]
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    prev = _RESULTS.get(n)
    status = "FAIL" if report.failed or (prev and prev[0] == "FAIL") else "PASS"
    if report.skipped:
        status = "SKIP"
    joined = "; ".join(d for d in ((prev[1] if prev else ""), detail) if d)
    _RESULTS[n] = (status, joined)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}" + (f"  ({detail})" if detail else ""))
