import pytest

from hibersim.host_model import HostMemory
from hibersim.guest_memory import GuestMemory
from hibersim.swap_manager import SwapManager

_acceptance: list[tuple[str, str]] = []


@pytest.fixture
def host():
    return HostMemory()


@pytest.fixture
def guest(host):
    return GuestMemory(host)


@pytest.fixture
def swap(guest, tmp_path):
    return SwapManager("sb", guest, tmp_path)


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _acceptance.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{mark}] {name}")
