import pytest

_CRITERIA: dict[int, tuple[bool, str]] = {}


class CriterionRecorder:
    """Collects one verdict per acceptance criterion for the end-of-run summary."""

    def __call__(self, number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok


@pytest.fixture(scope="session")
def criterion():
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
