import pytest

_ACCEPTANCE = pytest.StashKey[dict]()


class AcceptanceRecorder:
    """Records one verdict per criterion, prints it, then asserts it."""

    def __init__(self, store: dict):
        self._store = store

    def check(self, number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}: {title} | {detail}"
        self._store[number] = line
        print(line)
        assert passed, line


@pytest.fixture
def acceptance(request):
    return AcceptanceRecorder(request.config.stash.setdefault(_ACCEPTANCE, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
