import pytest

_RESULTS = {}


@pytest.fixture(scope="session")
def criterion():
    """record(number, passed, detail): combine per-criterion verdicts for the summary."""
    def record(number, passed, detail=""):
        ok, notes = _RESULTS.get(number, (True, []))
        _RESULTS[number] = (ok and bool(passed), notes + ([detail] if detail else []))
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        ok, notes = _RESULTS[number]
        terminalreporter.write_line(
            f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {'; '.join(notes)}")
