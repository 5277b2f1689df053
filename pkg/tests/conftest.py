import _acceptance_report


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_report.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance_report.RESULTS):
        terminalreporter.write_line(_acceptance_report.RESULTS[number])
