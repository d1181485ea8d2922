import re

# criterion number -> one-line measurement, filled in by the acceptance tests
DETAILS: dict[int, str] = {}

_NAME = re.compile(r"test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter):
    outcomes: dict[int, str] = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if rep.when != "call" and status == "passed":
                continue
            m = _NAME.search(rep.nodeid)
            if not m:
                continue
            n = int(m.group(1))
            ok = status == "passed"
            outcomes[n] = "PASS" if ok and outcomes.get(n, "PASS") == "PASS" else "FAIL"
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(outcomes):
        terminalreporter.write_line(f"criterion {n:2d}: {outcomes[n]}  {DETAILS.get(n, '')}")
