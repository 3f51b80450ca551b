import pytest

N_CRITERIA = 11
_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion for the final summary."""
    store = request.config.stash[_RESULTS]

    def record(number: int, passed: bool, detail: str) -> bool:
        store[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash[_RESULTS]
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in store:
            passed, detail = store[n]
            line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        else:
            line = f"criterion {n:2d}: FAIL  (no result recorded; the test errored or was skipped)"
        terminalreporter.write_line(line)
