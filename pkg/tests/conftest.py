import pytest

_RESULTS_KEY = "_acceptance_results"


@pytest.fixture(scope="session")
def acceptance(request):
    """Record one (passed, detail) entry per acceptance criterion."""
    results = getattr(request.config, _RESULTS_KEY, None)
    if results is None:
        results = {}
        setattr(request.config, _RESULTS_KEY, results)
    return results


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, _RESULTS_KEY, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
