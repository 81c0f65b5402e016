"""Prints one PASS/FAIL line per acceptance criterion at the end of a run."""

_results = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _results[report.nodeid] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (outcome, detail) in sorted(_results.items()):
        name = nodeid.split("::test_criterion_")[1]
        number, _, label = name.partition("_")
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {int(number):>2} {status}  {label.replace('_', ' ')}: {detail}")
