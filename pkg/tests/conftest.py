import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).parent))

import acceptance_log  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
