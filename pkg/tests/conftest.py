"""Shared pytest wiring.

The acceptance module registers one result per criterion as it runs; this
hook prints them as a compact PASS/FAIL block after the normal test
summary so a release run can be judged at a glance.
"""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None) if mod is not None else None
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, passed, detail in sorted(results):
        status = "PASS" if passed else "FAIL"
        line = f"[ACCEPTANCE {n}] {status} - {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
