import pytest

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion n")


@pytest.fixture
def measured(request):
    """Dict a test fills with measured values; they are shown in its acceptance line."""
    values = {}
    request.node._measured = values
    return values


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    n, title = marker.args
    values = getattr(item, "_measured", {})
    detail = ", ".join(f"{k}={v}" for k, v in values.items())
    _ACCEPTANCE[n] = (report.outcome.upper(), title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[n]
        status = "PASS" if status == "PASSED" else "FAIL"
        line = f"criterion {n:>2}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
