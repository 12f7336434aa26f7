import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    """Record one acceptance line; the lines are echoed immediately and again in the terminal summary."""

    def emit(ok: bool, criterion: str, details: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {criterion}: {details}"
        _ACCEPTANCE.append(line)
        print(line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
