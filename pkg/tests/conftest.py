import pytest

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call":
        return
    label = marker.args[0]
    detail = getattr(item, "acceptance_detail", "")
    if report.failed and call.excinfo is not None:
        detail = (detail + "; " if detail else "") + call.excinfo.exconly().splitlines()[0][:160]
    _ACCEPTANCE[label] = (report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[0].rstrip("."))):
        passed, detail = _ACCEPTANCE[label]
        line = f"{'PASS' if passed else 'FAIL'}  {label}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))


@pytest.fixture
def detail(request):
    """Attach a short measured summary to the acceptance line of this test."""
    def note(text: str) -> None:
        request.node.acceptance_detail = text
    return note
