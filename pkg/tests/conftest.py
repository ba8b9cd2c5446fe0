import pytest

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def record():
    """Store one pass/fail line per acceptance criterion for the run summary."""

    def _record(criterion: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[criterion] = (bool(ok), detail)
        return bool(ok)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
