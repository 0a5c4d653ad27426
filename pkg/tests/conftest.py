import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture
def criterion(request):
    """``criterion(k, ok, detail)`` prints and records one PASS/FAIL line for criterion k."""

    def record(k: int, ok: bool, detail: str) -> bool:
        line = f"criterion {k:>2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.stash[_LINES_KEY].append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
