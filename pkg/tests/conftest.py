import pytest

_LOG = pytest.StashKey[dict]()
N_CRITERIA = 12


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""
    log = request.config.stash.setdefault(_LOG, {})

    def report(n: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d} {title}: {detail}"
        print(line)
        log[n] = line
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(_LOG, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(log.get(n, f"FAIL criterion {n:2d}: no verdict recorded"))
