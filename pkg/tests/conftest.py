import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
