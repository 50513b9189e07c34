import acceptance_log
import pytest

from mrclip.report_model import Finding, default_vocabulary


@pytest.fixture
def vocab():
    return default_vocabulary(12, 8)


@pytest.fixture
def f1():
    return Finding("T2WI", "bilateral", "basal ganglia", "long T2 signal")


@pytest.fixture
def f2():
    return Finding("DWI", "none", "pons", "high signal")


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
