import pytest


def pytest_addoption(parser):
    parser.addoption("--extended", action="store_true", default=False, help="run the long 3D criteria")


def pytest_configure(config):
    config.addinivalue_line("markers", "extended: long-running 3D criteria, enabled with --extended")
    config.addinivalue_line("markers", "acceptance: one test per acceptance criterion")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--extended"):
        return
    skip = pytest.mark.skip(reason="extended criterion; pass --extended to run")
    for item in items:
        if "extended" in item.keywords:
            item.add_marker(skip)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and fail the test on FAIL."""

    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
