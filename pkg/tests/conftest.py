import re


def _order(line):
    m = re.search(r"C(\d+)(\w?)", line)
    return (int(m.group(1)), m.group(2)) if m else (0, "")


def pytest_terminal_summary(terminalreporter):
    lines = [value for reports in terminalreporter.stats.values() for rep in reports
             if getattr(rep, "when", None) == "call"
             for key, value in getattr(rep, "user_properties", ()) if key == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=_order):
            terminalreporter.write_line(line)
