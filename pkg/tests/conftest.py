import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo",
    max_examples=int(os.environ.get("HYPOTHESIS_MAX_EXAMPLES", "40")),
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# one summary line per acceptance criterion

_criteria: dict[int, dict] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            n, title = mark.args
            entry = _criteria.setdefault(n, {"title": title, "ids": set(), "failed": False, "seen": set()})
            entry["ids"].add(item.nodeid)


def pytest_deselected(items):
    for item in items:
        for n, entry in list(_criteria.items()):
            entry["ids"].discard(item.nodeid)
            if not entry["ids"]:
                del _criteria[n]


def pytest_runtest_logreport(report):
    for entry in _criteria.values():
        if report.nodeid in entry["ids"]:
            if report.failed:
                entry["failed"] = True
            if report.when == "call" or report.failed or report.skipped:
                entry["seen"].add(report.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        if e["failed"]:
            status = "FAIL"
        elif e["seen"] == e["ids"]:
            status = "PASS"
        else:
            status = "NOT RUN"
        terminalreporter.write_line(f"criterion {n}: {status}  {e['title']}")
