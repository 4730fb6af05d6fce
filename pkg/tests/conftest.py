import pytest

_RESULTS = pytest.StashKey[dict]()
N_CRITERIA = 10


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance outcome for the summary."""
    store = request.config.stash.setdefault(_RESULTS, {})

    def record(n: int, ok: bool, detail: str) -> bool:
        prev = store.get(n)
        if prev is not None:
            ok = ok and prev[0]
            detail = f"{prev[1]}; {detail}"
        store[n] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_RESULTS, None)
    if store is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in store:
            ok, detail = store[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL  (not run or errored before a result)")
