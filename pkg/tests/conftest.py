import pytest

_LINES: list[str] = []


@pytest.fixture
def report():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def add(criterion: int, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        _LINES.append(line)
        print(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
