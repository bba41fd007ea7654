import pytest

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash[VERDICTS]

    def record(criterion: int, passed, detail: str) -> None:
        status = "PASS" if passed is True else "FAIL" if passed is False else str(passed)
        lines.append((criterion, f"criterion {criterion}: {status}  {detail}"))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines, key=lambda x: x[0]):
        terminalreporter.write_line(line)
