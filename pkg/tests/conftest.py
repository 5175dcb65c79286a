import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_FILE = "test_acceptance.py"


class Timed:
    """Value plus the wall time it took to build."""

    def __init__(self, fn):
        t0 = time.perf_counter()
        self.value = fn()
        self.seconds = time.perf_counter() - t0


@pytest.fixture(scope="session")
def f16_design():
    from lpvl1 import f16
    return Timed(f16.design_f16)


@pytest.fixture(scope="session")
def f16_core_ppg(f16_design):
    from lpvl1 import f16
    from lpvl1.design import CORE_MAPS, ppg_suite
    return Timed(lambda: ppg_suite(f16_design.value, CORE_MAPS, f16.MU_PPG, verify=True))


_acceptance = []


def pytest_runtest_logreport(report):
    if ACCEPTANCE_FILE not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _acceptance.append((report.nodeid.split("::")[-1], report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in sorted(_acceptance):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict} {name}" + (f": {detail}" if detail else ""))
