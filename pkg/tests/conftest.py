import pytest

from acceptance_log import RESULTS
from desk import DeskRunner


@pytest.fixture(scope="session")
def desk():
    return DeskRunner()


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS.lines():
        terminalreporter.write_line(line)
