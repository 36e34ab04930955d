import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import _criteria  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if _criteria.LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_criteria.LINES):
            terminalreporter.write_line(_criteria.LINES[number])
