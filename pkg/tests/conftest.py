import acceptance_report


def pytest_terminal_summary(terminalreporter):
    if not acceptance_report.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(acceptance_report.RESULTS):
        ok, detail = acceptance_report.RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    for text in acceptance_report.NOTES:
        terminalreporter.write_line(f"INFO {text}")
