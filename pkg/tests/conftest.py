import pytest

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """Record a criterion outcome; the terminal summary prints one line per criterion."""
    store = request.config.stash[_VERDICTS]

    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"{criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
        store[criterion] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_VERDICTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(store, key=lambda k: int(k[2:]) if k[2:].isdigit() else 99):
        terminalreporter.write_line(store[key])
