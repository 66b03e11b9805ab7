from __future__ import annotations

import sys
from pathlib import Path

import pytest

# the oracle helpers live beside the tests
sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num = marker.args[0]
    entry = _CRITERIA.setdefault(num, {"title": marker.args[1], "ok": True, "detail": []})
    if rep.failed:
        entry["ok"] = False
    if rep.when == "call":
        entry["detail"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        e = _CRITERIA[num]
        status = "PASS" if e["ok"] else "FAIL"
        detail = "; ".join(e["detail"])
        terminalreporter.write_line(f"criterion {num:2d} {status}  {e['title']}" + (f"  [{detail}]" if detail else ""))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion covered by the test")
