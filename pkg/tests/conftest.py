import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture
def fixtures_dir():
    return FIXTURES


# -- acceptance summary: one PASS/FAIL line per criterion ---------------------------------

_acceptance: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, title = marker.args
    if rep.when == "call" or rep.failed or rep.skipped:
        prev = _acceptance.get(num, (title, "PASS"))[1]
        status = "FAIL" if rep.failed else ("SKIP" if rep.skipped else "PASS")
        if prev == "FAIL":
            status = "FAIL"
        _acceptance[num] = (title, status)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_acceptance):
        title, status = _acceptance[num]
        terminalreporter.write_line(f"[{status}] criterion {num:2d}: {title}")
