import re

import pytest

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion(request):
    """Recorder for one acceptance criterion, numbered by the test name."""
    number = int(re.search(r"criterion_(\d+)", request.node.name).group(1))

    def record(ok: bool, detail: str = "") -> None:
        _ACCEPTANCE[number] = (bool(ok), detail)

    yield record
    if number not in _ACCEPTANCE:
        _ACCEPTANCE[number] = (False, "did not complete")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
