import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

# One line per acceptance criterion, filled in by test_acceptance.py.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
