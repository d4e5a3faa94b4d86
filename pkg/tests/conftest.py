import pytest

from vitbench import tensor as T

# one verdict line per acceptance criterion, filled in by test_acceptance.py
# and echoed after the run (survives pytest's output capture)
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True, scope="session")
def strict_mode():
    # finiteness checking on for the whole suite
    T.set_strict(True)
    yield
    T.set_strict(False)
