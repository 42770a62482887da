import pytest

# criterion number -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
_selected: list[int] = []


@pytest.fixture
def record():
    def _record(number: int, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE[number] = (bool(passed), detail)
        return bool(passed)

    return _record


def pytest_collection_finish(session):
    # runs after -k/-m deselection, so only criteria that will run are listed
    for item in session.items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            _selected.extend(marker.args)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(*numbers): acceptance criteria covered by a test")


def pytest_terminal_summary(terminalreporter, config):
    if not _selected or config.option.collectonly:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(set(_selected)):
        ok, detail = ACCEPTANCE.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
