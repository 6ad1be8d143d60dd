"""Collects one pass/fail line per acceptance criterion and prints them at the end of the run."""

ACCEPTANCE: list[tuple[int, bool, str, float]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail, seconds in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} ({seconds:.0f}s) {detail}")
