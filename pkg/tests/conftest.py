"""Shared fixtures; collects the acceptance verdict lines for the summary."""

import pytest

_VERDICTS: dict[int, str] = {}


@pytest.fixture()
def verdict():
    """``verdict(n, passed, detail)`` records and prints one criterion line.

    ``passed`` may be None for informational criteria.
    """
    def record(number: int, passed, detail: str) -> None:
        status = {True: "PASS", False: "FAIL", None: "INFO"}[passed]
        line = f"criterion {number:2d}  {status}  {detail}"
        _VERDICTS[number] = line
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
