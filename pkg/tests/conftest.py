import pytest

from apart.diffcore import set_precision


@pytest.fixture(autouse=True)
def _f64():
    set_precision("f64")
    yield
    set_precision("f64")


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if not test_acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(test_acceptance.RESULTS):
        terminalreporter.write_line(test_acceptance.RESULTS[key])
