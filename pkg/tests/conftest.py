import pytest

_verdicts: dict[str, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if item.module.__name__.endswith("test_acceptance") and (report.when == "call" or report.failed):
        name = item.name.removeprefix("test_")
        if report.when == "call" or name not in _verdicts:
            _verdicts[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance")
    for name, verdict in _verdicts.items():
        terminalreporter.write_line(f"{verdict} {name}")
