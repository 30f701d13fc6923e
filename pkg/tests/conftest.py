from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

CRITERIA = {
    1: "oracle equivalence of the distributed step",
    2: "finite-difference and adjointness checks of the conv gradients",
    3: "halo sets equal brute-force dependence sets",
    4: "line planner matches exhaustive enumeration",
    5: "288 MiB for one 2048x2048x18 float32 sample",
    6: "cost-model structure (AR, SR, halo omission, K=1, sample-first)",
    7: "event-log bytes equal analytic halo/shuffle bytes",
    8: "planner picks spatial under a memory cap and sample for small layers",
}

_outcomes: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to acceptance criterion n")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes.setdefault(crit, []).append(report.outcome == "passed")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, desc in CRITERIA.items():
        res = _outcomes.get(n)
        if res is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(res) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {desc} ({len(res or [])} tests)")


@pytest.fixture
def configs():
    return CONFIGS
