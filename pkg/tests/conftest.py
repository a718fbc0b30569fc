import contextlib

import pytest

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
CRITERIA: dict[int, tuple[bool, str]] = {}


@contextlib.contextmanager
def criterion(number: int, detail: str = ""):
    """Record PASS/FAIL for an acceptance criterion around the checked block."""
    info = {"detail": detail}
    try:
        yield info
    except BaseException as exc:
        CRITERIA[number] = (False, f"{info['detail']} | {type(exc).__name__}: {exc}".strip(" |"))
        raise
    CRITERIA[number] = (True, info["detail"])


@pytest.fixture
def record():
    return criterion


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        first = detail.splitlines()[0] if detail else ""
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {first}")
