import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# filled by tests/test_acceptance.py: (number, title, passed, detail)
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {num:2d}. {title}: {detail}")
