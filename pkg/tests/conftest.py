import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synthetic import build_corpus, make_page  # noqa: E402


@pytest.fixture
def page():
    return make_page()


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return build_corpus(root)


# -- acceptance report ------------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    results = item.config._criteria.setdefault(number, {"title": title, "passed": True, "tests": 0})
    if report.when == "call":
        results["tests"] += 1
    if report.failed:
        results["passed"] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not config._criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(config._criteria):
        r = config._criteria[number]
        status = "PASS" if r["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {r['title']} ({r['tests']} checks)")
