import re

import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    The number comes from the test name (``test_criterion_NN_...``). A test
    that dies before recording is reported as FAIL.
    """
    n = int(re.match(r"test_criterion_(\d+)", request.node.name).group(1))

    def record(ok: bool, detail: str) -> bool:
        _LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    yield record
    _LINES.setdefault(n, f"criterion {n:2d}: FAIL  did not complete")


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
