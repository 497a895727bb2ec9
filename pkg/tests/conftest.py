import pytest

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one status line per acceptance criterion; printed at the end of the run."""
    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(_ACCEPTANCE[number])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
