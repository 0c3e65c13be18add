import contextlib

import pytest

_CRITERIA = []


@pytest.fixture
def criterion():
    """Context manager recording one acceptance line: ``with criterion(3, "title") as info``."""
    @contextlib.contextmanager
    def record(number, title):
        info = {}
        ok = False
        try:
            yield info
            ok = True
        finally:
            detail = ", ".join(f"{k}={v}" for k, v in info.items())
            line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}"
            _CRITERIA.append((number, line + (f" [{detail}]" if detail else "")))
            print(_CRITERIA[-1][1])
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
