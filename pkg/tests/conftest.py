import summary


def pytest_terminal_summary(terminalreporter):
    if summary.LINES:
        terminalreporter.section("acceptance criteria")
        for line in summary.LINES:
            terminalreporter.write_line(line)
