"""Shared test configuration: acceptance-line reporting."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail):
    """Collect one pass/fail line per acceptance criterion; printed in the
    terminal summary so capture modes cannot hide it."""
    status = "PASS" if passed else "FAIL"
    line = f"criterion {number:>2} {name:<28s} {status}  {detail}"
    _ACCEPTANCE_LINES.append(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance: full-scale end-to-end acceptance gates (slow)")
