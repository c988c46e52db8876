"""Shared pytest hooks: collects acceptance-criterion results and prints one
pass/fail line per criterion in the terminal summary."""

CRITERIA = []


def record_criterion(name, ok, detail=""):
    CRITERIA.append((name, bool(ok), detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERIA:
        status = "PASS" if ok else "FAIL"
        line = f"[{status}] {name}"
        if detail:
            line += f": {detail}"
        terminalreporter.write_line(line)
