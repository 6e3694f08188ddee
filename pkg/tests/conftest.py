import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# (number, title) -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), (passed, detail) in sorted(ACCEPTANCE.items()):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {num:>2}. {title}: {detail}")
