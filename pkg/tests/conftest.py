import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import verdicts  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running desk-scale experiment")


def pytest_terminal_summary(terminalreporter):
    if verdicts.LINES:
        terminalreporter.section("acceptance criteria")
        for line in verdicts.LINES:
            terminalreporter.write_line(line)
