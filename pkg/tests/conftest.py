import pytest

_LINES: list[str] = []


class Criterion:
    def __init__(self, name: str):
        self.name = name

    def check(self, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {self.name}: {detail}"
        print(line)
        _LINES.append(line)
        assert ok, line


@pytest.fixture
def criterion(request):
    def make(name: str) -> Criterion:
        return Criterion(name)
    return make


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
