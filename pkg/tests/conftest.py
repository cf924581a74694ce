import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, derandomize=True, print_blob=True)
settings.load_profile("repo")

_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        prev = _OUTCOMES.get(label, "PASS")
        _OUTCOMES[label] = "PASS" if (report.passed and prev == "PASS") else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")

    def key(label):
        head = label.split()[0]
        return (0, int(head)) if head.isdigit() else (1, label)

    for label in sorted(_OUTCOMES, key=key):
        terminalreporter.write_line(f"criterion {label}: {_OUTCOMES[label]}")
