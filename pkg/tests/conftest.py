"""Collects acceptance results and prints one PASS/FAIL line per criterion."""

import pytest

_RESULTS: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by this test")


@pytest.fixture
def record(request):
    """Attach a one-line measurement summary to the current acceptance test."""
    def _record(text: str) -> None:
        request.node.user_properties.append(("measured", text))
    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        measured = "; ".join(v for k, v in item.user_properties if k == "measured")
        status = "PASS" if report.outcome == "passed" else "FAIL"
        _RESULTS[name] = (status, measured)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    width = max(len(n) for n in _RESULTS)
    for name, (status, measured) in _RESULTS.items():
        terminalreporter.write_line(f"{status}  {name:<{width}}  {measured}")
