"""Shared test plumbing: acceptance results are gathered and printed as a
one-line-per-criterion summary at the end of the session."""

_results: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    name = props.get("criterion")
    if name is None:
        return
    if report.when == "call" or report.failed:
        verdict = "PASS" if report.passed else "FAIL"
        _results[name] = (verdict, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_results):
        verdict, detail = _results[name]
        terminalreporter.write_line(f"{verdict}  {name}  {detail}".rstrip())
