import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

REPO = Path(__file__).resolve().parents[1]

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test verifies")


@pytest.fixture
def measured(request):
    """Record measured values for the acceptance summary line."""
    marker = request.node.get_closest_marker("criterion")
    store = {}
    if marker is not None:
        _results.setdefault(marker.args[0], {"title": marker.args[1], "outcome": None, "measured": store})
        store = _results[marker.args[0]]["measured"]
    return store


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.outcome != "passed"):
        return
    entry = _results.setdefault(marker.args[0], {"title": marker.args[1], "outcome": None, "measured": {}})
    if rep.outcome != "passed" or entry["outcome"] is None:
        entry["outcome"] = rep.outcome


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_results):
        r = _results[n]
        status = {"passed": "PASS", None: "NOT RUN"}.get(r["outcome"], "FAIL")
        detail = ", ".join(f"{k}={_fmt(v)}" for k, v in r["measured"].items())
        tr.write_line(f"criterion {n:2d} {status:7s} {r['title']}" + (f"  [{detail}]" if detail else ""))


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)
