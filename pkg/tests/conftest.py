import pytest

from shadowcast.config import RunConfig


@pytest.fixture
def scene():
    """Default operating point: 570 W/m^2, -8 MHz, 485 nm spot, 4x4 binning, 1 s."""
    return RunConfig().to_scene()


_ACCEPTANCE = []


@pytest.fixture
def record():
    """Log one acceptance line; the lines are repeated in the terminal summary."""

    def _record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
