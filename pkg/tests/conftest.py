import pytest

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})

    def report(number: int, passed: bool, detail: str) -> None:
        results[number] = (bool(passed), detail)

    return report


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
