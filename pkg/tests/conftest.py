from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"

# lines reported by the acceptance suite, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def icecore_text() -> str:
    return (DATA / "deutnat_sample.txt").read_text()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
