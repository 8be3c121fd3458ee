import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = {}


class CriterionLog:
    def __call__(self, number: int, ok: bool, message: str):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {message}"
        _CRITERIA[number] = line
        print(line)
        assert ok, line


@pytest.fixture(scope="session")
def criterion():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
