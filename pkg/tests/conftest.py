import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=100, deadline=None,
    suppress_health_check=[HealthCheck.too_slow], derandomize=True,
)
settings.load_profile("default")

_criteria: dict[int, dict] = {}

# every test in the property module counts toward the invariant criterion
INVARIANT_CRITERION = (9, "invariant suite green")
PROPERTY_MODULE = "test_properties.py"
properties_collected = pytest.StashKey[bool]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    n, title = marker
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "passed": 0, "tests": []})
    # a skip is neutral; a criterion needs at least one pass and no failures
    entry["ok"] &= report.outcome != "failed"
    entry["passed"] += report.outcome == "passed"
    entry["tests"].append((report.nodeid.split("::")[-1], report.outcome))


def pytest_collection_modifyitems(config, items):
    found = False
    for item in items:
        if item.path.name == PROPERTY_MODULE:
            item.add_marker(pytest.mark.criterion(*INVARIANT_CRITERION))
            found = True
    config.stash[properties_collected] = found


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = (marker.args[0], marker.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        entry = _criteria[n]
        ok = entry["ok"] and entry["passed"] > 0
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {entry['title']}")
        if not ok:
            for name, outcome in entry["tests"]:
                terminalreporter.write_line(f"    {outcome:>7}  {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
