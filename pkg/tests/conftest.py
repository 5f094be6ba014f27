import pytest

VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record a criterion's outcome; printed once per criterion at the end of the run."""
    marker = request.node.get_closest_marker("criterion")
    number = marker.args[0]
    store = request.config.stash.setdefault(VERDICTS, {})

    def record(ok: bool, detail: str) -> None:
        store[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")

    yield record
    store.setdefault(number, (False, "did not complete"))


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(VERDICTS, None)
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        ok, detail = store[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
