"""Print one PASS/FAIL line per acceptance criterion in the summary."""

CRITERIA = {}  # nodeid -> (label, outcome)


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid or report.when != "call":
        return
    name = report.nodeid.split("::")[-1]
    label = name.removeprefix("test_").replace("_", " ")
    CRITERIA[report.nodeid] = (label, report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome in CRITERIA.values():
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {label}")
