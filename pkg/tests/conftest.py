import pytest

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record and print one acceptance line, then assert it passed."""
    config = request.config
    reporter = config.pluginmanager.getplugin("terminalreporter")

    def emit(number, ok, detail):
        line = f"ACCEPTANCE criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        config.stash.setdefault(_VERDICTS, []).append((number, line))
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        assert ok, line

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(_VERDICTS, []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
