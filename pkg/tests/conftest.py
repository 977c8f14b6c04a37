import pytest

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance_log(request):
    """Append ``(number, passed, detail)`` to the end-of-run acceptance table."""
    return request.config.stash[_ACCEPTANCE_KEY].append


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash[_ACCEPTANCE_KEY])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in lines:
        terminalreporter.line(f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}")
